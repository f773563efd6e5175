use queryshield::attacks::BoundaryParams;
use queryshield::detector::{calibrate_threshold, BanPolicy, BufferPolicy, DetectorConfig, QueryMetric};
use queryshield::encoder::{train_encoder, EncoderConfig};
use queryshield::harness::{generate_synthetic_dataset, run_episode, Artifacts, AttackSpec, EpisodeConfig};
use queryshield::models::{train_classifier, ClassifierConfig, Image, ImageShape};
use queryshield::numerics::OptimConfig;
use queryshield::rng::RootSeed;
use queryshield::transforms::{calibrate, TransformKind};

fn main() {
    let shape = ImageShape { h: 16, w: 16, c: 1 };
    let mut rng = RootSeed(42).stream("dataset");
    let full = generate_synthetic_dataset(shape, 4, 5000, &mut rng).unwrap();
    let (train, test) = full.split_at(4000);
    let trained = train_classifier(
        &train,
        &ClassifierConfig {
            hidden: vec![64, 32],
            holdout_fraction: 0.125,
            optim: OptimConfig { learning_rate: 0.1, momentum: 0.9, batch_size: 32, epochs: 20, seed: 42 },
        },
    )
    .unwrap();

    let sample: Vec<Image> = train.images.iter().take(64).cloned().collect();
    let mut trng = RootSeed(42).stream("transform-calibration");
    let low = 2.32 * (256.0f64 / 3072.0).sqrt();
    let mut lows = Vec::new();
    for kind in [TransformKind::Brightness, TransformKind::GaussianNoise, TransformKind::UniformNoise] {
        lows.push(calibrate(kind, &sample, low, &mut trng).unwrap());
    }
    let mut train_transforms = lows.clone();
    for kind in [TransformKind::Brightness, TransformKind::GaussianNoise, TransformKind::UniformNoise] {
        train_transforms.push(calibrate(kind, &sample, 2.2, &mut trng).unwrap());
    }
    let encoder = train_encoder(
        &train,
        &trained.model,
        &EncoderConfig {
            d: 32,
            margin: 10f64.sqrt(),
            fine_tune: OptimConfig { learning_rate: 0.01, momentum: 0.9, batch_size: 32, epochs: 10, seed: 42 },
            transforms: train_transforms.clone(),
        },
    )
    .unwrap();
    let mut srng = RootSeed(42).stream("benign-stream");
    let benign = generate_synthetic_dataset(shape, 4, 10_000, &mut srng).unwrap();
    let metric = QueryMetric::Encoder(&encoder);
    let encs: Vec<_> = benign.images.iter().map(|i| metric.encode_query(i).unwrap()).collect();
    let raws: Vec<_> = benign.images.iter().map(|i| QueryMetric::RawL2.encode_query(i).unwrap()).collect();
    let mut crng = RootSeed(42).stream("calibration");
    let threshold = calibrate_threshold(&encs, 50, 0.001, BufferPolicy::QueryBounded(2000), &mut crng).unwrap();
    let mut crng = RootSeed(42).stream("calibration-raw");
    let raw_threshold = calibrate_threshold(&raws, 50, 0.001, BufferPolicy::QueryBounded(2000), &mut crng).unwrap();
    println!("threshold {threshold} raw {raw_threshold}");

    let artifacts = Artifacts {
        classifier: trained.model.clone(),
        encoder: Some(encoder.clone()),
        detector: DetectorConfig {
            k: 50,
            threshold,
            buffer_policy: BufferPolicy::QueryBounded(2000),
            fpr_target: 0.001,
            ban_policy: BanPolicy::Immediate,
        },
        raw_threshold: Some(raw_threshold),
        dataset: test.clone(),
    };

    // invariance probe: mean encoder distance between two independently
    // transformed copies, per kind and distortion, vs tau
    let mut hrng = RootSeed(7).stream("inv-probe");
    for kind in [TransformKind::Brightness, TransformKind::GaussianNoise, TransformKind::UniformNoise] {
        for target in [0.67f64, 1.5, 2.2, 3.0] {
            let spec = calibrate(kind, &sample, target, &mut hrng).unwrap();
            let mut dsum = 0.0;
            let mut rsum = 0.0;
            let n = 50;
            for i in 0..n {
                let img = &test.images[i];
                let a = queryshield::transforms::apply(&spec, img, &mut hrng).unwrap();
                let b = queryshield::transforms::apply(&spec, img, &mut hrng).unwrap();
                let ea = metric.encode_query(&a).unwrap();
                let eb = metric.encode_query(&b).unwrap();
                dsum += queryshield::numerics::l2_dist(&ea.values, &eb.values);
                rsum += queryshield::numerics::l2_dist(a.pixels(), b.pixels());
            }
            println!("inv {kind:?} r {target}: enc {:.2} raw {:.2} (tau_enc {threshold:.2} tau_raw {raw_threshold:.2})", dsum / n as f64, rsum / n as f64);
        }
    }

    // blinder spread probe
    let surrogate = train_classifier(
        &train,
        &ClassifierConfig {
            hidden: vec![32],
            holdout_fraction: 0.125,
            optim: OptimConfig { learning_rate: 0.1, momentum: 0.9, batch_size: 32, epochs: 10, seed: 7 },
        },
    )
    .unwrap();
    let artifacts_for = |encoder: &queryshield::numerics::NetModel| Artifacts {
        classifier: trained.model.clone(),
        encoder: Some(encoder.clone()),
        detector: DetectorConfig {
            k: 50,
            threshold,
            buffer_policy: BufferPolicy::QueryBounded(2000),
            fpr_target: 0.001,
            ban_policy: BanPolicy::Immediate,
        },
        raw_threshold: Some(raw_threshold),
        dataset: test.clone(),
    };
    for (target, weight, noise_dim) in [
        (1.5 * threshold, 1.0, 16usize),
        (2.0 * threshold, 1.0, 16),
        (1.5 * threshold, 3.0, 16),
        (1.5 * threshold, 1.0, 32),
        (2.0 * threshold, 3.0, 32),
    ] {
        let blinder = queryshield::models::train_blinder(
            &train.images[..512],
            &surrogate.model,
            &queryshield::models::BlinderConfig {
                noise_dim,
                hidden: vec![64],
                distance_target: target,
                weight,
                optim: OptimConfig { learning_rate: 0.02, momentum: 0.9, batch_size: 32, epochs: 15, seed: 42 },
            },
        )
        .unwrap();
        let mut dets = Vec::new();
        for t in 0..4u64 {
            let mut p = queryshield::attacks::NesParams::default_hard_label(6000);
            p.epsilon = 0.25;
            p.blinding = queryshield::attacks::Blinding::Blinder(blinder.clone());
            let r = run_episode(&artifacts_for(&encoder), &EpisodeConfig { attack: AttackSpec::Nes(p), trials: 1, seed: 900 + t }).unwrap();
            dets.push(r.mean_detections);
        }
        println!(
            "blinder t {target:.2} w {weight} nd {noise_dim}: episode dets {:?}",
            dets
        );
        let mut brng = RootSeed(9).stream("blinder-probe");
        let mut pix = 0.0;
        let mut encd = 0.0;
        let mut agree = 0usize;
        let n = 50;
        for i in 0..n {
            let img = &test.images[i];
            let a = queryshield::models::blind(&blinder, img, &mut brng).unwrap();
            let b = queryshield::models::blind(&blinder, img, &mut brng).unwrap();
            pix += queryshield::numerics::l2_dist(a.pixels(), b.pixels());
            let ea = metric.encode_query(&a).unwrap();
            let eb = metric.encode_query(&b).unwrap();
            encd += queryshield::numerics::l2_dist(&ea.values, &eb.values);
            let la = queryshield::models::classify(&trained.model, &a).unwrap();
            let l0 = queryshield::models::classify(&trained.model, img).unwrap();
            if la == l0 { agree += 1; }
        }
        println!(
            "blinder target {target}: pix {:.2} enc {:.2} label agree {agree}/{n} (tau_enc {threshold:.2})",
            pix / n as f64,
            encd / n as f64
        );
    }

    for eps in [0.25f64] {
        let mut succ = 0;
        let mut dets = Vec::new();
        let mut queries = Vec::new();
        for t in 0..8u64 {
            let mut p = BoundaryParams::default_hard_label(30_000);
            p.epsilon = eps;
            let r = run_episode(&artifacts, &EpisodeConfig { attack: AttackSpec::Boundary(p), trials: 1, seed: 600 + t }).unwrap();
            if r.success_rate > 0.0 {
                succ += 1;
                dets.push(r.mean_detections);
                queries.push(r.mean_queries);
            }
        }
        let md = dets.iter().sum::<f64>() / dets.len().max(1) as f64;
        let mq = queries.iter().sum::<f64>() / queries.len().max(1) as f64;
        println!("boundary eps {eps}: success {succ}/8 detections {md:.1} queries {mq:.0}");
    }
}
