use rand::Rng;

use super::{blind_query, AttackTrace, Blinding, Oracle, StepLog};
use crate::error::{Error, Result};
use crate::models::Image;
use crate::numerics::{l2_dist, linf_dist};

#[derive(Debug, Clone)]
pub struct BoundaryParams {
    /// l-inf success bound.
    pub epsilon: f64,
    pub max_queries: u64,
    pub init_orth_step: f64,
    pub init_inward_step: f64,
    /// Inward step below this declares a premature-convergence stall.
    pub stall_threshold: f64,
    pub blinding: Blinding,
}

impl BoundaryParams {
    pub fn default_hard_label(max_queries: u64) -> Self {
        Self {
            epsilon: 0.05,
            max_queries,
            init_orth_step: 0.1,
            init_inward_step: 0.1,
            stall_threshold: 1e-7,
            blinding: Blinding::None,
        }
    }
}

/// Pre-clip orthogonal candidate: perturb x_cur in a random direction
/// orthogonal to (x - x_cur), renormalized so the l2 distance to x is
/// preserved exactly.
pub fn orthogonal_candidate<R: Rng>(
    x: &Image,
    x_cur: &Image,
    step: f64,
    rng: &mut R,
) -> Vec<f64> {
    let dim = x.dim();
    let toward: Vec<f64> = x
        .pixels()
        .iter()
        .zip(x_cur.pixels())
        .map(|(a, b)| a - b)
        .collect();
    let dist2: f64 = toward.iter().map(|v| v * v).sum();
    let mut r = super::random_unit_direction(dim, rng);
    if dist2 > 0.0 {
        // remove the component along (x - x_cur)
        let dot: f64 = r.iter().zip(&toward).map(|(a, b)| a * b).sum();
        for (ri, ti) in r.iter_mut().zip(&toward) {
            *ri -= dot * ti / dist2;
        }
    }
    let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let dist = dist2.sqrt();
    let scale = step * dist / rnorm;
    let moved: Vec<f64> = x_cur
        .pixels()
        .iter()
        .zip(&r)
        .map(|(p, ri)| p + scale * ri)
        .collect();
    // renormalize back onto the sphere of radius dist around x
    let new_dist = l2_dist(&moved, x.pixels()).max(1e-300);
    x.pixels()
        .iter()
        .zip(&moved)
        .map(|(xi, mi)| xi + (mi - xi) * dist / new_dist)
        .collect()
}

/// Decision-based attack alternating boundary-following orthogonal steps
/// with inward steps toward x, adapting both step sizes from trailing
/// acceptance rates. Stalls (inward step underflow) yield a failure trace.
pub fn boundary_attack<O: Oracle, R: Rng>(
    oracle: &mut O,
    x: &Image,
    target: usize,
    seed: &Image,
    params: &BoundaryParams,
    rng: &mut R,
) -> Result<AttackTrace> {
    let q0 = oracle.queries();
    let d0 = oracle.detections();
    let mut log: Vec<StepLog> = Vec::new();
    let mut x_adv = seed.clone();
    let mut orth_step = params.init_orth_step;
    let mut inward_step = params.init_inward_step;
    let mut orth_accepts: Vec<bool> = Vec::new();

    macro_rules! finish {
        ($success:expr) => {{
            let distortion = linf_dist(x_adv.pixels(), x.pixels());
            return Ok(AttackTrace {
                success: $success,
                queries_used: oracle.queries() - q0,
                detections: oracle.detections() - d0,
                final_image: x_adv,
                linf_distortion: distortion,
                log,
            });
        }};
    }
    macro_rules! query_label {
        ($img:expr) => {{
            let b = blind_query(&params.blinding, $img, rng)?;
            let mut labels = Vec::new();
            for q in &b.queries {
                match oracle.hard(q) {
                    Ok(l) => labels.push(l),
                    Err(Error::Banned(_)) => finish!(false),
                    Err(e) => return Err(e),
                }
            }
            b.reveal(&labels)
        }};
    }

    if params.max_queries < 1 {
        finish!(false);
    }
    let seed_label = query_label!(seed);
    if seed_label != target {
        finish!(false);
    }
    if linf_dist(x_adv.pixels(), x.pixels()) <= params.epsilon {
        finish!(true);
    }

    loop {
        if oracle.queries() - q0 + 2 > params.max_queries {
            finish!(false);
        }
        if inward_step < params.stall_threshold {
            finish!(false); // premature convergence
        }
        let cur_dist = l2_dist(x_adv.pixels(), x.pixels());

        let raw = orthogonal_candidate(x, &x_adv, orth_step, rng);
        let clipped: Vec<f64> = raw.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let candidate = Image::new(clipped, x.shape())?;
        let accept_geometry = l2_dist(candidate.pixels(), x.pixels()) <= cur_dist + 1e-9;
        let label = query_label!(&candidate);
        let accepted = accept_geometry && label == target;
        if accepted {
            x_adv = candidate;
        }
        orth_accepts.push(accepted);
        if orth_accepts.len() > 25 {
            orth_accepts.remove(0);
        }
        let rate = orth_accepts.iter().filter(|&&a| a).count() as f64 / orth_accepts.len() as f64;
        if orth_accepts.len() >= 5 {
            orth_step *= if rate > 0.5 { 1.1 } else { 0.9 };
            orth_step = orth_step.clamp(1e-9, 1.0);
        }

        let inward: Vec<f64> = x_adv
            .pixels()
            .iter()
            .zip(x.pixels())
            .map(|(a, o)| a + inward_step * (o - a))
            .collect();
        let candidate = Image::new(inward, x.shape())?;
        let label = query_label!(&candidate);
        if label == target {
            x_adv = candidate;
            inward_step = (inward_step * 1.1).min(0.5);
        } else {
            inward_step *= 0.9;
        }
        log.push(StepLog {
            queries: oracle.queries() - q0,
            distortion: l2_dist(x_adv.pixels(), x.pixels()),
        });
        if linf_dist(x_adv.pixels(), x.pixels()) <= params.epsilon {
            let label = query_label!(&x_adv);
            finish!(label == target);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::ModelOracle;
    use crate::models::{classify, ImageShape};
    use crate::numerics::{Activation, LayerSpec, LayerWeights, NetModel, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mean_threshold_model() -> NetModel {
        let dim = 16;
        let mut matrix = vec![0.0; dim * 2];
        for r in 0..dim {
            matrix[r * 2] = -1.0 / dim as f64;
            matrix[r * 2 + 1] = 1.0 / dim as f64;
        }
        NetModel::new(
            vec![LayerSpec { input_dim: dim, output_dim: 2, activation: Activation::SoftmaxLogits }],
            vec![LayerWeights {
                matrix: Tensor::new(matrix, vec![dim, 2]).unwrap(),
                bias: Tensor::vector(vec![0.5, -0.5]).unwrap(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn orthogonal_step_preserves_distance_pre_clip() {
        let shape = ImageShape { h: 4, w: 4, c: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Image::new((0..16).map(|_| rng.gen_range(0.0..1.0)).collect(), shape).unwrap();
        let cur = Image::new((0..16).map(|_| rng.gen_range(0.0..1.0)).collect(), shape).unwrap();
        let before = l2_dist(cur.pixels(), x.pixels());
        for _ in 0..50 {
            let cand = orthogonal_candidate(&x, &cur, 0.3, &mut rng);
            let after = l2_dist(&cand, x.pixels());
            assert!((after - before).abs() < 1e-9, "before {before} after {after}");
        }
    }

    #[test]
    fn immediate_success_when_seed_is_adversarial_and_close() {
        let model = mean_threshold_model();
        let shape = ImageShape { h: 4, w: 4, c: 1 };
        let x = Image::new(vec![0.48; 16], shape).unwrap();
        let seed = Image::new(vec![0.52; 16], shape).unwrap();
        assert_eq!(classify(&model, &seed).unwrap(), 1);
        let mut oracle = ModelOracle::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = BoundaryParams::default_hard_label(1000);
        let trace = boundary_attack(&mut oracle, &x, 1, &seed, &params, &mut rng).unwrap();
        assert!(trace.success);
        assert_eq!(trace.queries_used, 1);
    }

    #[test]
    fn boundary_attack_succeeds_and_distortion_log_nonincreasing() {
        let model = mean_threshold_model();
        let shape = ImageShape { h: 4, w: 4, c: 1 };
        // Feasibility: the boundary sits at mean 0.5, so x must be within
        // epsilon of it in every coordinate.
        let x = Image::new(vec![0.47; 16], shape).unwrap();
        let seed = Image::new(vec![0.75; 16], shape).unwrap();
        let mut successes = 0;
        for trial in 0..10 {
            let mut oracle = ModelOracle::new(&model);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let params = BoundaryParams::default_hard_label(20_000);
            let trace = boundary_attack(&mut oracle, &x, 1, &seed, &params, &mut rng).unwrap();
            assert_eq!(trace.queries_used, oracle.queries());
            for w in trace.log.windows(2) {
                assert!(w[1].distortion <= w[0].distortion + 1e-9, "distortion log increased");
            }
            if trace.success {
                assert!(trace.linf_distortion <= params.epsilon + 1e-12);
                assert_eq!(classify(&model, &trace.final_image).unwrap(), 1);
                successes += 1;
            }
        }
        assert!(successes > 0, "no boundary-attack success in 10 trials");
    }

    #[test]
    fn stall_yields_failure_trace() {
        let model = mean_threshold_model();
        let shape = ImageShape { h: 4, w: 4, c: 1 };
        let x = Image::new(vec![0.2; 16], shape).unwrap();
        let seed = Image::new(vec![0.9; 16], shape).unwrap();
        let mut oracle = ModelOracle::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = BoundaryParams::default_hard_label(50_000);
        params.init_inward_step = 1e-8; // below stall threshold at once
        let trace = boundary_attack(&mut oracle, &x, 1, &seed, &params, &mut rng).unwrap();
        assert!(!trace.success);
        assert_eq!(trace.queries_used, 1); // only the seed verification
    }
}
