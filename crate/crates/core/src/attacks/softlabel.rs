use rand::Rng;

use super::{offset_image, random_unit_direction, Oracle};
use crate::error::Result;
use crate::models::Image;

/// Estimate the soft output at x without querying near x: probe at
/// x + d*r and x + (d+eps)*r along random unit directions r and linearly
/// extrapolate back, y0 + (d/eps)(y0 - y1). Exact for linear oracles; the
/// probes can be placed beyond any history-based detector's radius.
/// Costs 2*trials oracle calls.
pub fn softlabel_extrapolate<O: Oracle, R: Rng>(
    oracle: &mut O,
    x: &Image,
    d: f64,
    eps: f64,
    trials: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    assert!(d > 0.0 && eps > 0.0 && trials > 0);
    let mut acc = vec![0.0; oracle.classes()];
    for _ in 0..trials {
        let r = random_unit_direction(x.dim(), rng);
        let y0 = oracle.soft(&offset_image(x, &r, d)?)?;
        let y1 = oracle.soft(&offset_image(x, &r, d + eps)?)?;
        for ((a, y0i), y1i) in acc.iter_mut().zip(&y0).zip(&y1) {
            *a += y0i + (d / eps) * (y0i - y1i);
        }
    }
    acc.iter_mut().for_each(|v| *v = (*v / trials as f64).max(0.0));
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        acc.iter_mut().for_each(|v| *v /= total);
    }
    Ok(acc)
}
