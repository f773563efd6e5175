use rand::Rng;

use super::whitebox::{next_most_likely, pgd_margin};
use super::{AttackTrace, Oracle, StepLog};
use crate::error::{Error, Result};
use crate::models::{ClassifierConfig, Dataset, Image};
use crate::numerics::{linf_dist, OptimConfig};

#[derive(Debug, Clone)]
pub struct SurrogateParams {
    /// Far-sample lower magnitude bound D (per coordinate).
    pub far_distance: f64,
    /// Near-sample magnitude bound d (not queried, label assumed).
    pub near_distance: f64,
    /// Queried far samples.
    pub n_far: usize,
    /// Assumed-label near samples.
    pub m_near: usize,
    /// l-inf bound for the transferred adversarial example.
    pub epsilon: f64,
    /// Confidence margin for the white-box attack on the surrogate.
    pub kappa: f64,
    pub pgd_steps: usize,
    pub hidden: usize,
    pub optim: OptimConfig,
}

impl SurrogateParams {
    pub fn default_untargeted(n_far: usize, seed: u64) -> Self {
        Self {
            far_distance: 0.09,
            near_distance: 0.01,
            n_far,
            m_near: n_far / 2,
            epsilon: 0.05,
            kappa: 100.0,
            pgd_steps: 300,
            hidden: 32,
            optim: OptimConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                batch_size: 32,
                epochs: 40,
                seed,
            },
        }
    }
}

/// Per-coordinate offset with magnitude uniform in [lo, hi] and a random
/// sign, clipped to the pixel box.
fn scatter<R: Rng>(x: &Image, lo: f64, hi: f64, rng: &mut R) -> Result<Image> {
    let pixels = x
        .pixels()
        .iter()
        .map(|p| {
            let mag = rng.gen_range(lo..hi);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            p + sign * mag
        })
        .collect();
    Image::clipped(pixels, x.shape())
}

/// Untargeted hybrid attack: query n far-scattered points, assume the
/// original label for m near points, train a local surrogate on both, then
/// transfer a high-confidence white-box adversarial example. Exactly
/// n + 1 oracle calls.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_surrogate_attack<O: Oracle, R: Rng>(
    oracle: &mut O,
    x: &Image,
    label: usize,
    params: &SurrogateParams,
    rng: &mut R,
) -> Result<AttackTrace> {
    if params.n_far == 0 {
        return Err(Error::InvalidConfig("need at least one far sample".into()));
    }
    let q0 = oracle.queries();
    let d0 = oracle.detections();
    let mut log: Vec<StepLog> = Vec::new();
    let mut images: Vec<Image> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();

    for _ in 0..params.n_far {
        let far = scatter(x, params.far_distance, 1.0, rng)?;
        match oracle.hard(&far) {
            Ok(l) => {
                labels.push(l);
                images.push(far);
            }
            Err(Error::Banned(_)) => {
                return Ok(AttackTrace::failure(
                    x.clone(),
                    oracle.queries() - q0,
                    oracle.detections() - d0,
                    log,
                ))
            }
            Err(e) => return Err(e),
        }
    }
    for _ in 0..params.m_near {
        let near = scatter(x, 0.0, params.near_distance.max(1e-12), rng)?;
        images.push(near);
        labels.push(label);
    }
    log.push(StepLog { queries: oracle.queries() - q0, distortion: f64::INFINITY });

    let distinct = {
        let mut seen = labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    };
    if distinct < 2 {
        // degenerate observation set: surrogate training impossible
        return Ok(AttackTrace::failure(x.clone(), oracle.queries() - q0, oracle.detections() - d0, log));
    }

    let shape = x.shape();
    let class_count = oracle.classes().max(labels.iter().max().unwrap() + 1);
    let dataset = Dataset::new(images, labels, class_count, shape)?;
    let config = ClassifierConfig {
        hidden: vec![params.hidden],
        holdout_fraction: 0.0,
        optim: params.optim.clone(),
    };
    let surrogate = crate::models::train_classifier(&dataset, &config)?.model;

    let target = next_most_likely(&surrogate, x)?;
    let candidate = pgd_margin(&surrogate, x, target, params.epsilon, params.kappa, params.pgd_steps)?;
    let verified = match oracle.hard(&candidate) {
        Ok(l) => l,
        Err(Error::Banned(_)) => {
            return Ok(AttackTrace::failure(x.clone(), oracle.queries() - q0, oracle.detections() - d0, log))
        }
        Err(e) => return Err(e),
    };
    let distortion = linf_dist(candidate.pixels(), x.pixels());
    let success = verified != label && distortion <= params.epsilon + 1e-12;
    log.push(StepLog { queries: oracle.queries() - q0, distortion });
    Ok(AttackTrace {
        success,
        queries_used: oracle.queries() - q0,
        detections: oracle.detections() - d0,
        final_image: candidate,
        linf_distortion: distortion,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::ModelOracle;
    use crate::models::{classify as classify_fn, ImageShape};
    use crate::numerics::{Activation, LayerSpec, LayerWeights, NetModel, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mean_threshold_model() -> NetModel {
        let dim = 16;
        let mut matrix = vec![0.0; dim * 2];
        for r in 0..dim {
            matrix[r * 2] = -4.0 / dim as f64;
            matrix[r * 2 + 1] = 4.0 / dim as f64;
        }
        NetModel::new(
            vec![LayerSpec { input_dim: dim, output_dim: 2, activation: Activation::SoftmaxLogits }],
            vec![LayerWeights {
                matrix: Tensor::new(matrix, vec![dim, 2]).unwrap(),
                bias: Tensor::vector(vec![2.0, -2.0]).unwrap(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn query_count_is_n_plus_one() {
        let model = mean_threshold_model();
        let shape = ImageShape { h: 4, w: 4, c: 1 };
        let x = Image::new(vec![0.47; 16], shape).unwrap();
        let label = classify_fn(&model, &x).unwrap();
        let mut oracle = ModelOracle::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = SurrogateParams::default_untargeted(64, 2);
        let trace = hybrid_surrogate_attack(&mut oracle, &x, label, &params, &mut rng).unwrap();
        assert_eq!(trace.queries_used, 65);
        assert_eq!(oracle.queries(), 65);
    }

    #[test]
    fn succeeds_against_linear_model() {
        let model = mean_threshold_model();
        let shape = ImageShape { h: 4, w: 4, c: 1 };
        let x = Image::new(vec![0.47; 16], shape).unwrap();
        let label = classify_fn(&model, &x).unwrap();
        let mut successes = 0;
        for trial in 0..5 {
            let mut oracle = ModelOracle::new(&model);
            let mut rng = ChaCha8Rng::seed_from_u64(10 + trial);
            let params = SurrogateParams::default_untargeted(128, 20 + trial);
            let trace = hybrid_surrogate_attack(&mut oracle, &x, label, &params, &mut rng).unwrap();
            if trace.success {
                assert!(trace.linf_distortion <= params.epsilon + 1e-12);
                assert_ne!(classify_fn(&model, &trace.final_image).unwrap(), label);
                successes += 1;
            }
        }
        assert!(successes > 0, "no surrogate success in 5 trials");
    }

    #[test]
    fn single_class_observations_fail_gracefully() {
        struct OneClass {
            queries: u64,
        }
        impl Oracle for OneClass {
            fn hard(&mut self, _image: &Image) -> Result<usize> {
                self.queries += 1;
                Ok(0)
            }
            fn queries(&self) -> u64 {
                self.queries
            }
            fn classes(&self) -> usize {
                2
            }
        }
        let shape = ImageShape { h: 4, w: 4, c: 1 };
        let x = Image::new(vec![0.5; 16], shape).unwrap();
        let mut oracle = OneClass { queries: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = SurrogateParams::default_untargeted(16, 4);
        params.m_near = 8;
        let trace = hybrid_surrogate_attack(&mut oracle, &x, 0, &params, &mut rng).unwrap();
        assert!(!trace.success);
        assert_eq!(trace.queries_used, 16); // no verification query spent
    }

    #[test]
    fn m_zero_edge_still_runs() {
        let model = mean_threshold_model();
        let shape = ImageShape { h: 4, w: 4, c: 1 };
        let x = Image::new(vec![0.47; 16], shape).unwrap();
        let label = classify_fn(&model, &x).unwrap();
        let mut oracle = ModelOracle::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = SurrogateParams::default_untargeted(64, 6);
        params.m_near = 0;
        let trace = hybrid_surrogate_attack(&mut oracle, &x, label, &params, &mut rng).unwrap();
        assert_eq!(trace.queries_used, 65);
    }
}
