use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use queryshield::attacks::{Blinding, BoundaryParams, NesParams, SurrogateParams};
use queryshield::detector::{
    calibrate_threshold, k_sweep, BanPolicy, BufferPolicy, DetectorConfig, QueryMetric,
};
use queryshield::encoder::{train_encoder, EncoderConfig};
use queryshield::error::{Error, Result};
use queryshield::gateway::{serve, Gateway};
use queryshield::harness::{
    config_get, economics_query_bounded, economics_time_bounded, emit_k_sweep, emit_report,
    generate_synthetic_dataset, load_cifar10, parse_report, run_episode, Artifacts, AttackSpec,
    EpisodeConfig,
};
use queryshield::models::{train_classifier, ClassifierConfig, Dataset, ImageShape};
use queryshield::numerics::{load_model, save_model, ModelKind, OptimConfig};
use queryshield::rng::RootSeed;
use queryshield::transforms::{calibrate, TransformKind, TransformSpec, ALL_KINDS};

#[derive(Parser)]
#[command(name = "queryshield", version, about = "Query-history attack detection testbed")]
struct Cli {
    /// Root seed; all randomness derives from named sub-streams of it.
    #[arg(long, global = true, env = "QUERYSHIELD_SEED", default_value_t = 42)]
    seed: u64,
    /// key=value config file; any key can also be set with --set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set k=25 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Artifact directory (models, thresholds, metadata).
    #[arg(long, global = true, default_value = "artifacts")]
    artifacts: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate/load data, train classifier and similarity encoder.
    Train {
        /// Load a CIFAR-10 binary batch instead of synthetic data.
        #[arg(long)]
        cifar: Option<PathBuf>,
    },
    /// Calibrate the detection threshold on a benign stream.
    Calibrate,
    /// Thresholds across a list of k values, written as plot data.
    SweepK {
        #[arg(long, default_value = "1,5,10,25,50,100")]
        ks: String,
        #[arg(long, default_value = "sweep.dat")]
        out: PathBuf,
    },
    /// One attack trial; prints the trace summary.
    Attack {
        #[arg(long, default_value = "nes")]
        kind: String,
        #[arg(long)]
        blinding: Option<String>,
        /// Run against the bare model, no monitor.
        #[arg(long, default_value_t = false)]
        undefended: bool,
    },
    /// Multi-trial attack episode; appends a report row.
    Episode {
        #[arg(long, default_value = "nes")]
        kind: String,
        #[arg(long)]
        blinding: Option<String>,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Attack-cost arithmetic for a detection count.
    Economics {
        #[arg(long)]
        detections: f64,
        #[arg(long, default_value_t = 100.0)]
        buffer_hours: f64,
        #[arg(long, default_value_t = 1e4)]
        buffer_queries: f64,
        #[arg(long, default_value_t = 1.5)]
        price_per_1000: f64,
        #[arg(long, default_value_t = 1 << 20)]
        max_queries: u64,
    },
    /// Serve the line protocol over TCP.
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
    },
    /// Pretty-print a report file.
    Report {
        #[arg(long, default_value = "report.csv")]
        path: PathBuf,
    },
}

fn merged_config(cli: &Cli) -> Result<BTreeMap<String, String>> {
    let mut map = match &cli.config {
        Some(path) => queryshield::harness::read_config(path)?,
        None => BTreeMap::new(),
    };
    for pair in &cli.overrides {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("--set expects key=value, got {pair:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

struct Settings {
    shape: ImageShape,
    classes: usize,
    train_size: usize,
    test_size: usize,
    encode_dim: usize,
    k: usize,
    fpr: f64,
    buffer: usize,
    trials: usize,
    max_queries: u64,
    stream_len: usize,
    ban: BanPolicy,
    low_target: f64,
    epsilon: f64,
    boundary_epsilon: f64,
    seed: u64,
}

impl Settings {
    fn resolve(cli: &Cli) -> Result<Self> {
        let map = merged_config(cli)?;
        let h = config_get(&map, "height", 16usize)?;
        let w = config_get(&map, "width", 16usize)?;
        let c = config_get(&map, "channels", 1usize)?;
        let shape = ImageShape { h, w, c };
        let ban = match config_get(&map, "ban-policy", "immediate".to_string())?.as_str() {
            "immediate" => BanPolicy::Immediate,
            "pow2" => BanPolicy::PowerOfTwo,
            "geometric" => BanPolicy::Geometric {
                base: config_get(&map, "ban-base", 1.1)?,
                offset: config_get(&map, "ban-offset", 50.0)?,
            },
            other => return Err(Error::InvalidConfig(format!("unknown ban policy {other:?}"))),
        };
        // transform distortion target, scaled from the reference 2.32 on
        // 3072-dim images down to this image size
        let low_target = config_get(
            &map,
            "low-distortion",
            2.32 * (shape.dim() as f64 / 3072.0).sqrt(),
        )?;
        Ok(Self {
            shape,
            classes: config_get(&map, "classes", 4usize)?,
            train_size: config_get(&map, "train-size", 4000usize)?,
            test_size: config_get(&map, "test-size", 1000usize)?,
            encode_dim: config_get(&map, "encode-dim", 16usize)?,
            k: config_get(&map, "k", 50usize)?,
            fpr: config_get(&map, "fpr", 0.001)?,
            buffer: config_get(&map, "buffer", 2000usize)?,
            trials: config_get(&map, "trials", 20usize)?,
            max_queries: config_get(&map, "max-queries", 200_000u64)?,
            stream_len: config_get(&map, "stream-len", 2000usize)?,
            ban,
            low_target,
            // Desk-scale l-inf budgets: the procedural dataset's class
            // margins are wider than natural-image ones, so the attack
            // radius scales up accordingly. The boundary attack minimizes
            // l2 and needs extra l-inf headroom.
            epsilon: config_get(&map, "epsilon", 0.25)?,
            boundary_epsilon: config_get(&map, "boundary-epsilon", 0.25)?,
            seed: config_get(&map, "seed", cli.seed)?,
        })
    }

    fn dataset(&self, cifar: Option<&Path>) -> Result<(Dataset, Dataset)> {
        let full = match cifar {
            Some(path) => load_cifar10(path)?,
            None => {
                let mut rng = RootSeed(self.seed).stream("dataset");
                generate_synthetic_dataset(
                    self.shape,
                    self.classes,
                    self.train_size + self.test_size,
                    &mut rng,
                )?
            }
        };
        let n = full.len().saturating_sub(self.test_size).max(1);
        Ok(full.split_at(n))
    }
}

fn classifier_path(dir: &Path) -> PathBuf {
    dir.join("classifier.bin")
}

fn encoder_path(dir: &Path) -> PathBuf {
    dir.join("encoder.bin")
}

fn meta_path(dir: &Path) -> PathBuf {
    dir.join("meta.conf")
}

fn threshold_path(dir: &Path) -> PathBuf {
    dir.join("threshold.conf")
}

fn cmd_train(cli: &Cli, settings: &Settings, cifar: Option<&Path>) -> Result<()> {
    std::fs::create_dir_all(&cli.artifacts)?;
    let (train, _test) = settings.dataset(cifar)?;
    println!("training classifier on {} images...", train.len());
    let trained = train_classifier(
        &train,
        &ClassifierConfig {
            hidden: vec![64, 32],
            holdout_fraction: 0.125,
            optim: OptimConfig {
                learning_rate: 0.1,
                momentum: 0.9,
                batch_size: 32,
                epochs: 30,
                seed: settings.seed,
            },
        },
    )?;
    println!("holdout accuracy {:.3}", trained.holdout_accuracy);

    println!("calibrating positive-pair transforms...");
    let mut rng = RootSeed(settings.seed).stream("transform-calibration");
    let sample: Vec<_> = train.images.iter().take(64).cloned().collect();
    let mut transforms = Vec::new();
    for kind in [TransformKind::Brightness, TransformKind::GaussianNoise, TransformKind::UniformNoise] {
        match calibrate(kind, &sample, settings.low_target, &mut rng) {
            Ok(spec) => {
                println!("  {} r={:.4}", kind.name(), spec.r);
                transforms.push(spec);
            }
            Err(e) => println!("  {} skipped: {e}", kind.name()),
        }
    }

    println!("fine-tuning similarity encoder (d={})...", settings.encode_dim);
    let encoder = train_encoder(
        &train,
        &trained.model,
        &EncoderConfig {
            d: settings.encode_dim,
            margin: 10f64.sqrt(),
            fine_tune: OptimConfig {
                learning_rate: 0.01,
                momentum: 0.9,
                batch_size: 32,
                epochs: 10,
                seed: settings.seed,
            },
            transforms,
        },
    )?;

    save_model(&classifier_path(&cli.artifacts), &trained.model, &ModelKind::Plain)?;
    save_model(&encoder_path(&cli.artifacts), &encoder, &ModelKind::SecretEncoder)?;
    let meta = format!(
        "height={}\nwidth={}\nchannels={}\nclasses={}\nseed={}\n",
        settings.shape.h, settings.shape.w, settings.shape.c, settings.classes, settings.seed
    );
    std::fs::write(meta_path(&cli.artifacts), meta)?;
    println!("artifacts written to {}", cli.artifacts.display());
    Ok(())
}

fn load_artifacts(cli: &Cli, settings: &Settings) -> Result<Artifacts> {
    let (classifier, _) = load_model(&classifier_path(&cli.artifacts))?;
    let (encoder, kind) = load_model(&encoder_path(&cli.artifacts))?;
    if kind != ModelKind::SecretEncoder {
        return Err(Error::Format("encoder artifact has wrong kind".into()));
    }
    let thresholds = queryshield::harness::read_config(&threshold_path(&cli.artifacts))
        .map_err(|_| Error::InvalidInput("run `calibrate` before this command".into()))?;
    let threshold = config_get(&thresholds, "threshold", f64::NAN)?;
    let raw_threshold = config_get(&thresholds, "raw-threshold", f64::NAN)?;
    if !threshold.is_finite() {
        return Err(Error::InvalidInput("missing calibrated threshold".into()));
    }
    let (_, test) = settings.dataset(None)?;
    Ok(Artifacts {
        classifier,
        encoder: Some(encoder),
        detector: DetectorConfig {
            k: settings.k,
            threshold,
            buffer_policy: BufferPolicy::QueryBounded(settings.buffer),
            fpr_target: settings.fpr,
            ban_policy: settings.ban,
        },
        raw_threshold: raw_threshold.is_finite().then_some(raw_threshold),
        dataset: test,
    })
}

fn benign_encodings(settings: &Settings, metric: &QueryMetric, dataset: &Dataset) -> Result<Vec<queryshield::encoder::Encoding>> {
    let _ = settings;
    dataset.images.iter().map(|i| metric.encode_query(i)).collect()
}

fn cmd_calibrate(cli: &Cli, settings: &Settings) -> Result<()> {
    let (encoder, _) = load_model(&encoder_path(&cli.artifacts))?;
    let (train, _) = settings.dataset(None)?;
    let take = train.len().min(settings.stream_len.max(2 * settings.k));
    let pool = Dataset {
        images: train.images[..take].to_vec(),
        labels: train.labels[..take].to_vec(),
        class_count: train.class_count,
        shape: train.shape,
    };
    let policy = BufferPolicy::QueryBounded(settings.buffer);
    let mut rng = RootSeed(settings.seed).stream("calibration-shuffle");
    let enc = benign_encodings(settings, &QueryMetric::Encoder(&encoder), &pool)?;
    let threshold = calibrate_threshold(&enc, settings.k, settings.fpr, policy, &mut rng)?;
    let mut rng = RootSeed(settings.seed).stream("calibration-shuffle-raw");
    let raw = benign_encodings(settings, &QueryMetric::RawL2, &pool)?;
    let raw_threshold = calibrate_threshold(&raw, settings.k, settings.fpr, policy, &mut rng)?;
    std::fs::write(
        threshold_path(&cli.artifacts),
        format!("threshold={threshold}\nraw-threshold={raw_threshold}\n"),
    )?;
    println!("threshold={threshold:.6} raw-threshold={raw_threshold:.6} (k={}, fpr={})", settings.k, settings.fpr);
    Ok(())
}

fn cmd_sweep(cli: &Cli, settings: &Settings, ks: &str, out: &Path) -> Result<()> {
    let (encoder, _) = load_model(&encoder_path(&cli.artifacts))?;
    let (train, _) = settings.dataset(None)?;
    let enc = benign_encodings(settings, &QueryMetric::Encoder(&encoder), &train)?;
    let k_list: Vec<usize> = ks
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Format(format!("bad k {s:?}"))))
        .collect::<Result<_>>()?;
    let mut rng = RootSeed(settings.seed).stream("sweep-shuffle");
    let pairs = k_sweep(&enc, &k_list, settings.fpr, BufferPolicy::QueryBounded(settings.buffer), &mut rng)?;
    emit_k_sweep(&pairs, out)?;
    for (k, tau) in &pairs {
        println!("k={k} tau={tau:.6}");
    }
    Ok(())
}

fn parse_blinding(settings: &Settings, artifacts: &Artifacts, spec: Option<&str>) -> Result<Blinding> {
    let Some(spec) = spec else { return Ok(Blinding::None) };
    if spec == "none" {
        return Ok(Blinding::None);
    }
    if let Some(rest) = spec.strip_prefix("extrapolate:") {
        let d: f64 = rest.parse().map_err(|_| Error::Format("bad extrapolation distance".into()))?;
        return Ok(Blinding::Extrapolate { d, eps: d / 4.0 });
    }
    let kind = ALL_KINDS
        .iter()
        .find(|k| k.name() == spec)
        .copied()
        .ok_or_else(|| Error::Format(format!("unknown blinding {spec:?}")))?;
    let mut rng = RootSeed(settings.seed).stream("blinding-calibration");
    let sample: Vec<_> = artifacts.dataset.images.iter().take(64).cloned().collect();
    let spec: TransformSpec = calibrate(kind, &sample, settings.low_target, &mut rng)?;
    Ok(Blinding::Transform(spec))
}

fn attack_spec(settings: &Settings, artifacts: &Artifacts, kind: &str, blinding: Option<&str>) -> Result<AttackSpec> {
    Ok(match kind {
        "none" => AttackSpec::None { stream_len: settings.stream_len },
        "nes" => {
            let mut params = NesParams::default_hard_label(settings.max_queries);
            params.epsilon = settings.epsilon;
            params.blinding = parse_blinding(settings, artifacts, blinding)?;
            AttackSpec::Nes(params)
        }
        "boundary" => {
            let mut params = BoundaryParams::default_hard_label(settings.max_queries);
            params.epsilon = settings.boundary_epsilon;
            params.blinding = parse_blinding(settings, artifacts, blinding)?;
            AttackSpec::Boundary(params)
        }
        "surrogate" => AttackSpec::Surrogate(SurrogateParams::default_untargeted(512, settings.seed)),
        other => return Err(Error::InvalidConfig(format!("unknown attack {other:?}"))),
    })
}

fn cmd_episode(cli: &Cli, settings: &Settings, kind: &str, blinding: Option<&str>, out: &Path, trials: usize) -> Result<()> {
    let artifacts = load_artifacts(cli, settings)?;
    let attack = attack_spec(settings, &artifacts, kind, blinding)?;
    let report = run_episode(&artifacts, &EpisodeConfig { attack, trials, seed: settings.seed })?;
    println!(
        "{}: success {:.2} queries {:.0}±{:.0} detections {:.1} (raw-l2 {:.1}) accounts {:.1}",
        report.attack,
        report.success_rate,
        report.mean_queries,
        report.sd_queries,
        report.mean_detections,
        report.raw_l2_detections,
        report.mean_accounts,
    );
    let mut existing = if out.exists() {
        parse_report(&std::fs::read_to_string(out)?)?
    } else {
        Vec::new()
    };
    existing.push(report);
    emit_report(&existing, out)?;
    Ok(())
}

fn cmd_economics(
    detections: f64,
    buffer_hours: f64,
    buffer_queries: f64,
    price: f64,
    max_queries: u64,
) -> Result<()> {
    use queryshield::detector::{optimal_attacker_side_channel, side_channel_bits};
    println!("time-bounded buffer: {:.1} attacker-hours", economics_time_bounded(detections, buffer_hours));
    println!(
        "query-bounded buffer: ${:.2}",
        economics_query_bounded(detections, buffer_queries, price)
    );
    println!(
        "side-channel bits/account: pow2 {:.2}, geometric(1.1) {:.2}",
        side_channel_bits(&BanPolicy::PowerOfTwo, max_queries),
        side_channel_bits(&BanPolicy::Geometric { base: 1.1, offset: 50.0 }, max_queries),
    );
    let (bits, q) = optimal_attacker_side_channel(1.0 / 18.0, 50);
    println!("optimal probing attacker: {bits:.2} bits per account, {q:.0} expected queries");
    println!(
        "accounts to cross geometric policy: {:.1}",
        detections / 1.1
    );
    Ok(())
}

fn cmd_serve(cli: &Cli, settings: &Settings, port: u16) -> Result<()> {
    let artifacts = load_artifacts(cli, settings)?;
    let gateway = Gateway::new(
        artifacts.classifier,
        artifacts.encoder,
        artifacts.detector,
        settings.shape,
        false,
    )?;
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    println!("serving on 127.0.0.1:{port}");
    let stop = AtomicBool::new(false);
    serve(&Mutex::new(gateway), listener, &stop)
}

fn cmd_report(path: &Path) -> Result<()> {
    let reports = parse_report(&std::fs::read_to_string(path)?)?;
    println!(
        "{:<10} {:>8} {:>12} {:>10} {:>11} {:>8} {:>9}",
        "attack", "success", "queries", "sd", "detections", "raw-l2", "accounts"
    );
    for r in reports {
        println!(
            "{:<10} {:>8.2} {:>12.1} {:>10.1} {:>11.1} {:>8.1} {:>9.1}",
            r.attack, r.success_rate, r.mean_queries, r.sd_queries, r.mean_detections,
            r.raw_l2_detections, r.mean_accounts
        );
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = (|| -> Result<()> {
        let settings = Settings::resolve(&cli)?;
        match &cli.command {
            Command::Train { cifar } => cmd_train(&cli, &settings, cifar.as_deref()),
            Command::Calibrate => cmd_calibrate(&cli, &settings),
            Command::SweepK { ks, out } => cmd_sweep(&cli, &settings, ks, out),
            Command::Attack { kind, blinding, undefended } => {
                let mut artifacts = load_artifacts(&cli, &settings)?;
                if *undefended {
                    // effectively disable flagging
                    artifacts.detector.threshold = f64::MIN_POSITIVE;
                }
                let attack = attack_spec(&settings, &artifacts, kind, blinding.as_deref())?;
                let report = run_episode(&artifacts, &EpisodeConfig { attack, trials: 1, seed: settings.seed })?;
                println!(
                    "success={} queries={:.0} detections={:.0} distortion={:.4}",
                    report.success_rate > 0.0,
                    report.mean_queries,
                    report.mean_detections,
                    report.mean_distortion
                );
                Ok(())
            }
            Command::Episode { kind, blinding, out } => {
                cmd_episode(&cli, &settings, kind, blinding.as_deref(), out, settings.trials)
            }
            Command::Economics { detections, buffer_hours, buffer_queries, price_per_1000, max_queries } => {
                cmd_economics(*detections, *buffer_hours, *buffer_queries, *price_per_1000, *max_queries)
            }
            Command::Serve { port } => cmd_serve(&cli, &settings, *port),
            Command::Report { path } => cmd_report(path),
        }
    })();
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
