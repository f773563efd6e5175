use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::softlabel::softlabel_extrapolate;
use super::{AttackTrace, Blinding, Oracle, StepLog};
use crate::error::{Error, Result};
use crate::models::{blind, Image};
use crate::numerics::linf_dist;
use crate::transforms::apply;

#[derive(Debug, Clone)]
pub struct NesParams {
    /// Gaussian basis scale.
    pub sigma: f64,
    /// Basis count (antithetic pairs, must be even).
    pub n: usize,
    /// Samples per score estimate.
    pub s: usize,
    /// Sampling-ball radius for score estimation.
    pub mu: f64,
    pub learning_rate: f64,
    /// l-inf success bound.
    pub epsilon: f64,
    pub max_queries: u64,
    pub blinding: Blinding,
}

impl NesParams {
    /// Paper defaults: sigma 0.001, n 4, s 50, mu 0.001, lr 0.01, eps 0.05.
    pub fn default_hard_label(max_queries: u64) -> Self {
        Self {
            sigma: 0.001,
            n: 4,
            s: 50,
            mu: 0.001,
            learning_rate: 0.01,
            epsilon: 0.05,
            max_queries,
            blinding: Blinding::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 || self.mu <= 0.0 || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("nes scales must be positive".into()));
        }
        if self.n < 2 || self.n % 2 != 0 || self.s == 0 {
            return Err(Error::InvalidConfig("nes needs even n >= 2 and s >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) || self.epsilon == 0.0 {
            return Err(Error::InvalidConfig("epsilon must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// How score-estimation points are drawn around a basis point.
pub enum Sampler<'a> {
    LinfBall(f64),
    Transform(&'a crate::transforms::TransformSpec),
    Blinder(&'a crate::models::Blinder),
}

impl Sampler<'_> {
    fn draw<R: Rng>(&self, x: &Image, rng: &mut R) -> Result<Image> {
        match self {
            Sampler::LinfBall(mu) => {
                let pixels = x
                    .pixels()
                    .iter()
                    .map(|p| p + rng.gen_range(-*mu..*mu))
                    .collect();
                Image::clipped(pixels, x.shape())
            }
            Sampler::Transform(spec) => apply(spec, x, rng),
            Sampler::Blinder(b) => blind(b, x, rng),
        }
    }
}

/// Estimate class probabilities at `point` from the label proportions of s
/// sampled queries. Exactly s oracle calls.
pub fn estimate_score<O: Oracle, R: Rng>(
    oracle: &mut O,
    point: &Image,
    s: usize,
    sampler: &Sampler,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; oracle.classes()];
    for _ in 0..s {
        let q = sampler.draw(point, rng)?;
        let label = oracle.hard(&q)?;
        counts[label] += 1.0;
    }
    counts.iter_mut().for_each(|c| *c /= s as f64);
    Ok(counts)
}

fn score_at<O: Oracle, R: Rng>(
    oracle: &mut O,
    point: &Image,
    params: &NesParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    match &params.blinding {
        Blinding::None => estimate_score(oracle, point, params.s, &Sampler::LinfBall(params.mu), rng),
        Blinding::Transform(spec) => {
            estimate_score(oracle, point, params.s, &Sampler::Transform(spec), rng)
        }
        Blinding::Blinder(b) => estimate_score(oracle, point, params.s, &Sampler::Blinder(b), rng),
        Blinding::Extrapolate { d, eps } => softlabel_extrapolate(oracle, point, *d, *eps, 1, rng),
    }
}

/// NES gradient estimate of the target-class score at x, using n antithetic
/// Gaussian basis points: g = (1/(n sigma)) sum score_t(x + sigma delta_i) delta_i.
pub fn nes_gradient<O: Oracle, R: Rng>(
    oracle: &mut O,
    x: &Image,
    target: usize,
    params: &NesParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    params.validate()?;
    let dim = x.dim();
    let mut g = vec![0.0; dim];
    for _ in 0..params.n / 2 {
        let delta: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for sign in [1.0, -1.0] {
            let pixels = x
                .pixels()
                .iter()
                .zip(&delta)
                .map(|(p, d)| p + sign * params.sigma * d)
                .collect();
            let theta = Image::clipped(pixels, x.shape())?;
            let score = score_at(oracle, &theta, params, rng)?[target];
            for (gi, di) in g.iter_mut().zip(&delta) {
                *gi += score * sign * di;
            }
        }
    }
    let scale = 1.0 / (params.n as f64 * params.sigma);
    g.iter_mut().for_each(|v| *v *= scale);
    Ok(g)
}

fn project(x: &Image, candidate: &[f64], delta: f64) -> Result<Image> {
    let pixels = x
        .pixels()
        .iter()
        .zip(candidate)
        .map(|(orig, c)| c.clamp(orig - delta, orig + delta))
        .collect();
    Image::clipped(pixels, x.shape())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Hard-label NES attack: seed with an image of the target class, then
/// alternate score-gradient steps with multiplicative shrinking of the
/// l-inf ball around x until the distortion bound reaches epsilon.
const MAX_DECAY: f64 = 0.05;

pub fn nes_attack<O: Oracle, R: Rng>(
    oracle: &mut O,
    x: &Image,
    target: usize,
    seed: &Image,
    params: &NesParams,
    rng: &mut R,
) -> Result<AttackTrace> {
    params.validate()?;
    let q0 = oracle.queries();
    let d0 = oracle.detections();
    let mut log: Vec<StepLog> = Vec::new();
    let mut x_adv = seed.clone();
    let mut delta = linf_dist(seed.pixels(), x.pixels());
    // Trust-region schedule on the ball radius: propose shrinking by at most
    // MAX_DECAY per accepted step, backing off multiplicatively on rejection.
    let mut decay = MAX_DECAY;
    let mut lr = params.learning_rate;

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
    macro_rules! try_query {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(Error::Banned(_)) => finish!(false),
                Err(e) => return Err(e),
            }
        };
    }

    // Under extrapolation blinding the attacker holds soft-label access and
    // never queries near the current iterate: acceptance checks go through
    // the same far-probe score estimate as the gradient.
    let extrapolated = matches!(params.blinding, Blinding::Extrapolate { .. });
    // Acceptance is a single high-stakes decision per step, so it gets a
    // lower-variance estimate (more probe directions) than the gradient.
    const ACCEPT_TRIALS: usize = 3;
    macro_rules! label_at {
        ($point:expr) => {
            if let Blinding::Extrapolate { d, eps } = &params.blinding {
                crate::models::argmax(&try_query!(softlabel_extrapolate(
                    oracle,
                    $point,
                    *d,
                    *eps,
                    ACCEPT_TRIALS,
                    rng
                )))
            } else {
                try_query!(oracle.hard($point))
            }
        };
    }

    if params.max_queries < 1 {
        finish!(false);
    }
    // The single seed-label query is isolated: it cannot be flagged on its
    // own, so even a fully blinded attacker issues it directly.
    let seed_label = try_query!(oracle.hard(seed));
    if seed_label != target {
        finish!(false);
    }
    if delta <= params.epsilon {
        finish!(true);
    }

    loop {
        let used = oracle.queries() - q0;
        let (score_cost, label_cost) = if extrapolated {
            (2, 2 * ACCEPT_TRIALS as u64)
        } else {
            (params.s as u64, 1)
        };
        let step_cost = params.n as u64 * score_cost + 2 * label_cost;
        if used + step_cost > params.max_queries {
            finish!(false);
        }
        let g = try_query!(nes_gradient(oracle, &x_adv, target, params, rng));
        let stepped: Vec<f64> = x_adv
            .pixels()
            .iter()
            .zip(&g)
            .map(|(p, gi)| p + lr * sign(*gi))
            .collect();
        let proposal_delta = (delta * (1.0 - decay)).max(params.epsilon);
        let candidate = project(x, &stepped, proposal_delta)?;
        let label = label_at!(&candidate);
        if label == target {
            x_adv = candidate;
            delta = proposal_delta;
            decay = (decay * 2.0).min(MAX_DECAY);
            lr = (lr * 1.5).min(params.learning_rate);
        } else {
            // retry the gradient step without shrinking the ball
            let fallback = project(x, &stepped, delta)?;
            let label = label_at!(&fallback);
            if label == target {
                x_adv = fallback;
            } else {
                // both rejected: the step overshoots near the boundary
                lr = (lr / 2.0).max(1e-5);
            }
            decay = (decay / 2.0).max(1e-4);
        }
        log.push(StepLog { queries: oracle.queries() - q0, distortion: delta });
        // Slack for clamp round-off: (x + eps) - x can exceed eps by 1 ulp.
        let slack = params.epsilon * (1.0 + 1e-9);
        if delta <= slack && linf_dist(x_adv.pixels(), x.pixels()) <= slack {
            finish!(true);
        }
    }
}
