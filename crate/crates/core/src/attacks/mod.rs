//! Adversary suite: hard-label NES, the boundary attack, the hybrid
//! surrogate attack, white-box utilities, query blinding, soft-label
//! extrapolation, and diversity filtering.

mod boundary;
mod diversity;
mod nes;
mod oracle;
mod softlabel;
mod surrogate;
mod whitebox;

pub use boundary::{boundary_attack, orthogonal_candidate, BoundaryParams};
pub use diversity::{brute_force_mis, diversity_greedy, diversity_independent_set};
pub use nes::{estimate_score, nes_attack, nes_gradient, NesParams, Sampler};
pub use oracle::{ModelOracle, Oracle};
pub use softlabel::softlabel_extrapolate;
pub use surrogate::{hybrid_surrogate_attack, SurrogateParams};
pub use whitebox::{fgsm, pgd_margin};

use std::io::Write;

use rand::Rng;

use crate::error::Result;
use crate::models::{blind, Blinder, Image};
use crate::transforms::{apply, TransformSpec};

/// Query preprocessing applied by an adaptive attacker before each oracle
/// call. `Extrapolate` is the soft-label scheme handled inside the NES score
/// estimator; the other variants are hard-label.
#[derive(Debug, Clone)]
pub enum Blinding {
    None,
    Transform(TransformSpec),
    Blinder(Blinder),
    /// Query at x + d·r and x + (d+eps)·r, extrapolate back (soft mode).
    Extrapolate { d: f64, eps: f64 },
}

/// Queries to send for one logical point, plus the revealing rule.
pub struct BlindedQuery {
    pub queries: Vec<Image>,
}

impl BlindedQuery {
    /// For all hard-label blindings a single query's label is the answer.
    pub fn reveal(&self, labels: &[usize]) -> usize {
        labels[0]
    }
}

/// Materialize the blinded query list for one point. Hard-label blindings
/// send exactly one image.
pub fn blind_query<R: Rng>(blinding: &Blinding, x: &Image, rng: &mut R) -> Result<BlindedQuery> {
    let queries = match blinding {
        Blinding::None => vec![x.clone()],
        Blinding::Transform(spec) => vec![apply(spec, x, rng)?],
        Blinding::Blinder(b) => vec![blind(b, x, rng)?],
        Blinding::Extrapolate { d, eps } => {
            let dir = random_unit_direction(x.dim(), rng);
            vec![offset_image(x, &dir, *d)?, offset_image(x, &dir, d + eps)?]
        }
    };
    Ok(BlindedQuery { queries })
}

pub(crate) fn random_unit_direction<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

pub(crate) fn offset_image(x: &Image, dir: &[f64], scale: f64) -> Result<Image> {
    let pixels = x
        .pixels()
        .iter()
        .zip(dir)
        .map(|(p, d)| p + scale * d)
        .collect();
    Image::clipped(pixels, x.shape())
}

/// One attack step as recorded in the trace: cumulative oracle queries and
/// the current distortion of the working point.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub queries: u64,
    pub distortion: f64,
}

#[derive(Debug, Clone)]
pub struct AttackTrace {
    pub success: bool,
    pub queries_used: u64,
    pub detections: u64,
    pub final_image: Image,
    pub linf_distortion: f64,
    pub log: Vec<StepLog>,
}

impl AttackTrace {
    pub fn failure(image: Image, queries: u64, detections: u64, log: Vec<StepLog>) -> Self {
        let distortion = f64::INFINITY;
        Self {
            success: false,
            queries_used: queries,
            detections,
            final_image: image,
            linf_distortion: distortion,
            log,
        }
    }
}

/// Append traces as line-delimited records:
/// `success queries detections linf-distortion steps`.
pub fn append_trace_log<W: Write>(w: &mut W, traces: &[AttackTrace]) -> Result<()> {
    for t in traces {
        writeln!(
            w,
            "{} {} {} {:.9} {}",
            t.success as u8,
            t.queries_used,
            t.detections,
            t.linf_distortion,
            t.log.len()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ImageShape;
    use crate::numerics::l2_dist;
    use crate::transforms::TransformKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(shape: ImageShape, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..shape.dim()).map(|_| rng.gen_range(0.2..0.8)).collect();
        Image::new(pixels, shape).unwrap()
    }

    #[test]
    fn blind_none_is_identity() {
        let shape = ImageShape { h: 4, w: 4, c: 1 };
        let x = image(shape, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = blind_query(&Blinding::None, &x, &mut rng).unwrap();
        assert_eq!(b.queries.len(), 1);
        assert_eq!(b.queries[0].pixels(), x.pixels());
        assert_eq!(b.reveal(&[3]), 3);
    }

    #[test]
    fn blind_transform_matches_apply() {
        let shape = ImageShape { h: 4, w: 4, c: 1 };
        let x = image(shape, 3);
        let spec = TransformSpec::new(TransformKind::Brightness, 0.1).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let b = blind_query(&Blinding::Transform(spec.clone()), &x, &mut r1).unwrap();
        let direct = apply(&spec, &x, &mut r2).unwrap();
        assert_eq!(b.queries.len(), 1);
        assert_eq!(b.queries[0].pixels(), direct.pixels());
    }

    #[test]
    fn blind_extrapolate_two_collinear_queries() {
        let shape = ImageShape { h: 4, w: 4, c: 1 };
        let x = image(shape, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = blind_query(&Blinding::Extrapolate { d: 0.05, eps: 0.01 }, &x, &mut rng).unwrap();
        assert_eq!(b.queries.len(), 2);
        let d0 = l2_dist(b.queries[0].pixels(), x.pixels());
        let d1 = l2_dist(b.queries[1].pixels(), x.pixels());
        assert!((d0 - 0.05).abs() < 1e-9, "d0 {d0}");
        assert!((d1 - 0.06).abs() < 1e-9, "d1 {d1}");
    }

    #[test]
    fn blinded_queries_move_the_point() {
        // calibrated-distortion sanity: over many draws, a brightness
        // transform moves the image by its nominal pre-clip mean distortion
        // E|c| * sqrt(D) = r/2 * sqrt(D)
        let shape = ImageShape { h: 8, w: 8, c: 1 };
        let x = image(shape, 7);
        let spec = TransformSpec::new(TransformKind::Brightness, 0.2).unwrap();
        let nominal = 0.2 / 2.0 * (shape.dim() as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut total = 0.0;
        for _ in 0..400 {
            let b = blind_query(&Blinding::Transform(spec.clone()), &x, &mut rng).unwrap();
            total += l2_dist(b.queries[0].pixels(), x.pixels());
        }
        let mean = total / 400.0;
        assert!(
            (mean - nominal).abs() / nominal < 0.2,
            "mean distance {mean}, nominal {nominal}"
        );
    }

    #[test]
    fn trace_log_line_format() {
        let shape = ImageShape { h: 2, w: 2, c: 1 };
        let x = image(shape, 9);
        let trace = AttackTrace {
            success: true,
            queries_used: 12,
            detections: 2,
            final_image: x,
            linf_distortion: 0.05,
            log: vec![StepLog { queries: 12, distortion: 0.05 }],
        };
        let mut buf = Vec::new();
        append_trace_log(&mut buf, &[trace]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1 12 2 0.050000000 1\n");
    }
}
