//! Randomized image-processing blinding transforms, with Monte-Carlo
//! calibration of the strength parameter against a target expected l2
//! distortion. All transforms clip to [0,1] and are the identity at r = 0.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::Image;
use crate::numerics::l2_dist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformKind {
    UniformNoise,
    Translate,
    Rotate,
    PixelScale,
    CropResize,
    Brightness,
    Contrast,
    GaussianNoise,
}

pub const ALL_KINDS: [TransformKind; 8] = [
    TransformKind::UniformNoise,
    TransformKind::Translate,
    TransformKind::Rotate,
    TransformKind::PixelScale,
    TransformKind::CropResize,
    TransformKind::Brightness,
    TransformKind::Contrast,
    TransformKind::GaussianNoise,
];

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::UniformNoise => "uniform-noise",
            TransformKind::Translate => "translate",
            TransformKind::Rotate => "rotate",
            TransformKind::PixelScale => "pixel-scale",
            TransformKind::CropResize => "crop-resize",
            TransformKind::Brightness => "brightness",
            TransformKind::Contrast => "contrast",
            TransformKind::GaussianNoise => "gaussian-noise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_KINDS
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown transform kind '{s}'")))
    }

    /// Inclusive upper bound of the legal strength range.
    pub fn max_param(self) -> f64 {
        match self {
            TransformKind::UniformNoise => 1.0,
            TransformKind::Translate => 8.0,
            TransformKind::Rotate => 1.0,
            TransformKind::PixelScale => 0.999,
            TransformKind::CropResize => 0.4999,
            TransformKind::Brightness => 1.0,
            TransformKind::Contrast => 0.999,
            TransformKind::GaussianNoise => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub r: f64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, r: f64) -> Result<Self> {
        let max = kind.max_param();
        // Tolerate float round-off from grid arithmetic at the upper bound.
        if !r.is_finite() || r < 0.0 || r > max * (1.0 + 1e-9) {
            return Err(Error::InvalidConfig(format!(
                "parameter {r} outside legal range [0, {max}] for {}",
                kind.name()
            )));
        }
        Ok(Self { kind, r: r.min(max) })
    }
}

/// Apply one random draw of the transform. Deterministic given the rng state.
pub fn apply<R: Rng>(spec: &TransformSpec, image: &Image, rng: &mut R) -> Result<Image> {
    TransformSpec::new(spec.kind, spec.r)?;
    let r = spec.r;
    if r == 0.0 {
        return Ok(image.clone());
    }
    let out = match spec.kind {
        TransformKind::UniformNoise => {
            let px: Vec<f64> = image.pixels().iter().map(|&p| p + rng.gen_range(-r..r)).collect();
            Image::clipped(px, image.shape())?
        }
        TransformKind::Translate => {
            let dx = rng.gen_range(-r..r);
            let dy = rng.gen_range(-r..r);
            translate_bilinear(image, dx, dy)
        }
        TransformKind::Rotate => {
            let c = rng.gen_range(-r..r);
            rotate_bilinear(image, c * std::f64::consts::PI)
        }
        TransformKind::PixelScale => {
            let c = rng.gen_range(1.0 - r..1.0 + r);
            pixel_scale(image, c)
        }
        TransformKind::CropResize => {
            let c = rng.gen_range(0.0..r);
            crop_resize(image, c)
        }
        TransformKind::Brightness => {
            let c = rng.gen_range(-r..r);
            brightness_shift(image, c)
        }
        TransformKind::Contrast => {
            let c = rng.gen_range(1.0 - r..1.0);
            contrast_adjust(image, c)
        }
        TransformKind::GaussianNoise => {
            let px: Vec<f64> = image
                .pixels()
                .iter()
                .map(|&p| {
                    let n: f64 = StandardNormal.sample(rng);
                    p + r * n
                })
                .collect();
            Image::clipped(px, image.shape())?
        }
    };
    Ok(out)
}

/// Add the constant c to every pixel, clipped.
pub fn brightness_shift(image: &Image, c: f64) -> Image {
    let px: Vec<f64> = image.pixels().iter().map(|&p| p + c).collect();
    Image::clipped(px, image.shape()).expect("finite shift")
}

/// Multiply every pixel by c, clipped.
pub fn pixel_scale(image: &Image, c: f64) -> Image {
    let px: Vec<f64> = image.pixels().iter().map(|&p| p * c).collect();
    Image::clipped(px, image.shape()).expect("finite scale")
}

/// Mean-preserving contrast: x' = x + (c - 1) * (x - mean), per channel.
pub fn contrast_adjust(image: &Image, c: f64) -> Image {
    let sh = image.shape();
    let plane = sh.h * sh.w;
    let mut px = image.pixels().to_vec();
    for ch in 0..sh.c {
        let slice = &mut px[ch * plane..(ch + 1) * plane];
        let mean: f64 = slice.iter().sum::<f64>() / plane as f64;
        for p in slice.iter_mut() {
            *p += (c - 1.0) * (*p - mean);
        }
    }
    Image::clipped(px, sh).expect("finite contrast")
}

fn sample_bilinear(image: &Image, ch: usize, y: f64, x: f64) -> f64 {
    let sh = image.shape();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        let yy = y0 as i64 + dy;
        if yy < 0 || yy >= sh.h as i64 {
            continue; // zero fill
        }
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            let xx = x0 as i64 + dx;
            if xx < 0 || xx >= sh.w as i64 {
                continue;
            }
            acc += wy * wx * image.get(ch, yy as usize, xx as usize);
        }
    }
    acc
}

/// Shift by (dx, dy) fractional pixels with bilinear interpolation and zero
/// fill in the uncovered border.
pub fn translate_bilinear(image: &Image, dx: f64, dy: f64) -> Image {
    let sh = image.shape();
    let mut px = vec![0.0; sh.dim()];
    for ch in 0..sh.c {
        for y in 0..sh.h {
            for x in 0..sh.w {
                let v = sample_bilinear(image, ch, y as f64 - dy, x as f64 - dx);
                px[ch * sh.h * sh.w + y * sh.w + x] = v;
            }
        }
    }
    Image::clipped(px, sh).expect("finite translate")
}

/// Rotate about the image center with bilinear interpolation, zero fill.
pub fn rotate_bilinear(image: &Image, angle: f64) -> Image {
    let sh = image.shape();
    let cy = (sh.h as f64 - 1.0) / 2.0;
    let cx = (sh.w as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut px = vec![0.0; sh.dim()];
    for ch in 0..sh.c {
        for y in 0..sh.h {
            for x in 0..sh.w {
                let ry = y as f64 - cy;
                let rx = x as f64 - cx;
                // inverse rotation of the output coordinate
                let sy = cy + (-sin) * rx + cos * ry;
                let sx = cx + cos * rx + sin * ry;
                px[ch * sh.h * sh.w + y * sh.w + x] = sample_bilinear(image, ch, sy, sx);
            }
        }
    }
    Image::clipped(px, sh).expect("finite rotate")
}

/// Crop to normalized box [c, c, 1-c, 1-c] and resize back with bilinear
/// sampling at half-pixel centers.
pub fn crop_resize(image: &Image, c: f64) -> Image {
    let sh = image.shape();
    let scale = 1.0 - 2.0 * c;
    let mut px = vec![0.0; sh.dim()];
    for ch in 0..sh.c {
        for y in 0..sh.h {
            for x in 0..sh.w {
                let u = c + scale * ((x as f64 + 0.5) / sh.w as f64);
                let v = c + scale * ((y as f64 + 0.5) / sh.h as f64);
                let sx = u * sh.w as f64 - 0.5;
                let sy = v * sh.h as f64 - 0.5;
                px[ch * sh.h * sh.w + y * sh.w + x] = sample_bilinear(image, ch, sy, sx);
            }
        }
    }
    Image::clipped(px, sh).expect("finite crop")
}

/// Monte-Carlo estimate of the mean l2 distortion of a transform over a set
/// of sample images.
pub fn expected_distortion<R: Rng>(
    spec: &TransformSpec,
    sample_images: &[Image],
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if sample_images.is_empty() {
        return Err(Error::InvalidInput("empty sample set".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    let mut total = 0.0;
    for t in 0..trials {
        let img = &sample_images[t % sample_images.len()];
        let out = apply(spec, img, rng)?;
        total += l2_dist(out.pixels(), img.pixels());
    }
    Ok(total / trials as f64)
}

pub const CALIBRATION_TRIALS: usize = 200;
pub const CALIBRATION_TOLERANCE: f64 = 0.05;

/// Bisection on the strength parameter against the Monte-Carlo expected
/// distortion, to within 5% of the target. Measured distortion is monotone
/// nondecreasing in r for every kind, so bisection is sound.
pub fn calibrate<R: Rng>(
    kind: TransformKind,
    sample_images: &[Image],
    target_l2: f64,
    rng: &mut R,
) -> Result<TransformSpec> {
    if target_l2 < 0.0 {
        return Err(Error::InvalidConfig("target must be >= 0".into()));
    }
    if target_l2 == 0.0 {
        return TransformSpec::new(kind, 0.0);
    }
    let mut lo = 0.0;
    let mut hi = kind.max_param();
    let at_max = expected_distortion(&TransformSpec::new(kind, hi)?, sample_images, CALIBRATION_TRIALS, rng)?;
    if at_max < target_l2 * (1.0 - CALIBRATION_TOLERANCE) {
        return Err(Error::InvalidConfig(format!(
            "target distortion {target_l2} unreachable for {} (max {at_max:.3})",
            kind.name()
        )));
    }
    let mut best = hi;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let spec = TransformSpec::new(kind, mid)?;
        let measured = expected_distortion(&spec, sample_images, CALIBRATION_TRIALS, rng)?;
        if (measured - target_l2).abs() <= CALIBRATION_TOLERANCE * target_l2 {
            best = mid;
            break;
        }
        if measured < target_l2 {
            lo = mid;
        } else {
            hi = mid;
        }
        best = 0.5 * (lo + hi);
    }
    TransformSpec::new(kind, best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ImageShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(h: usize, w: usize, c: usize) -> ImageShape {
        ImageShape { h, w, c }
    }

    fn random_image<R: Rng>(sh: ImageShape, rng: &mut R) -> Image {
        let px: Vec<f64> = (0..sh.dim()).map(|_| rng.gen_range(0.0..1.0)).collect();
        Image::new(px, sh).unwrap()
    }

    fn cifar_shape_images(n: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| random_image(shape(32, 32, 3), &mut rng)).collect()
    }

    #[test]
    fn identity_at_zero_for_every_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(shape(8, 8, 3), &mut rng);
        for kind in ALL_KINDS {
            let spec = TransformSpec::new(kind, 0.0).unwrap();
            let out = apply(&spec, &img, &mut rng).unwrap();
            assert_eq!(out.pixels(), img.pixels(), "{} not identity at r=0", kind.name());
        }
    }

    #[test]
    fn brightness_shift_distortion_anchor() {
        // Full headroom: mid-range pixels so a +0.05 shift never clips.
        let sh = shape(32, 32, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let px: Vec<f64> = (0..sh.dim()).map(|_| rng.gen_range(0.2..0.8)).collect();
        let img = Image::new(px, sh).unwrap();
        let out = brightness_shift(&img, 0.05);
        let dist = l2_dist(out.pixels(), img.pixels());
        assert!((dist - 2.771).abs() < 0.001, "distortion {dist}");
    }

    #[test]
    fn integer_translate_matches_index_shift_oracle() {
        let sh = shape(6, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(sh, &mut rng);
        let out = translate_bilinear(&img, 1.0, 0.0);
        for ch in 0..sh.c {
            for y in 0..sh.h {
                for x in 0..sh.w {
                    let want = if x == 0 { 0.0 } else { img.get(ch, y, x - 1) };
                    assert_eq!(out.get(ch, y, x), want, "at ({ch},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn output_range_invariant_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in ALL_KINDS {
            for _ in 0..20 {
                let img = random_image(shape(8, 8, 1), &mut rng);
                let r = rng.gen_range(0.0..kind.max_param());
                let spec = TransformSpec::new(kind, r).unwrap();
                let out = apply(&spec, &img, &mut rng).unwrap();
                assert!(out.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn rotation_round_trip_on_interior() {
        let sh = shape(16, 16, 1);
        // Use a smooth low-frequency image so interpolation error is
        // dominated by the transform, not pixel noise.
        let mut px = vec![0.0; sh.dim()];
        for y in 0..16 {
            for x in 0..16 {
                px[y * 16 + x] =
                    0.5 + 0.4 * (0.35 * x as f64).sin() * (0.3 * y as f64).cos();
            }
        }
        let smooth = Image::new(px, sh).unwrap();
        let angle = 0.3;
        let there = rotate_bilinear(&smooth, angle);
        let back = rotate_bilinear(&there, -angle);
        let mut err = 0.0;
        let mut count = 0;
        for y in 4..12 {
            for x in 4..12 {
                err += (back.get(0, y, x) - smooth.get(0, y, x)).abs();
                count += 1;
            }
        }
        let mean = err / count as f64;
        assert!(mean < 0.02, "mean abs error {mean}");
    }

    #[test]
    fn expected_distortion_zero_and_uniform_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Mid-range pixels avoid clipping so the closed form applies.
        let sh = shape(32, 32, 3);
        let imgs: Vec<Image> = (0..4)
            .map(|_| {
                let px: Vec<f64> = (0..sh.dim()).map(|_| rng.gen_range(0.2..0.8)).collect();
                Image::new(px, sh).unwrap()
            })
            .collect();
        let zero = TransformSpec::new(TransformKind::UniformNoise, 0.0).unwrap();
        assert_eq!(expected_distortion(&zero, &imgs, 10, &mut rng).unwrap(), 0.0);
        // E || U(-r,r)^D ||_2 ~= r * sqrt(D/3) pre-clipping.
        let r = 0.064;
        let spec = TransformSpec::new(TransformKind::UniformNoise, r).unwrap();
        let measured = expected_distortion(&spec, &imgs, 200, &mut rng).unwrap();
        let closed_form = r * (sh.dim() as f64 / 3.0).sqrt();
        assert!(
            (measured - closed_form).abs() / closed_form < 0.03,
            "measured {measured}, closed form {closed_form}"
        );
    }

    #[test]
    fn calibrate_brightness_near_paper_values() {
        let imgs = cifar_shape_images(8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let low = calibrate(TransformKind::Brightness, &imgs, 2.32, &mut rng).unwrap();
        assert!((0.075..=0.105).contains(&low.r), "low-distortion r = {}", low.r);
        let high = calibrate(TransformKind::Brightness, &imgs, 5.10, &mut rng).unwrap();
        assert!((0.17..=0.24).contains(&high.r), "high-distortion r = {}", high.r);
        // Self-consistency: the bisection accepts within 5% of target on its
        // own noisy measurement, so allow sampling error on top of that here.
        let measured = expected_distortion(&low, &imgs, 400, &mut rng).unwrap();
        assert!((measured - 2.32).abs() / 2.32 < 0.13, "measured {measured}");
    }

    #[test]
    fn calibrate_zero_target_gives_zero_param() {
        let imgs = cifar_shape_images(2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = calibrate(TransformKind::Rotate, &imgs, 0.0, &mut rng).unwrap();
        assert_eq!(spec.r, 0.0);
    }

    #[test]
    fn unreachable_target_reported() {
        let imgs = cifar_shape_images(2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        assert!(calibrate(TransformKind::Rotate, &imgs, 1e6, &mut rng).is_err());
    }

    #[test]
    fn calibration_monotone_in_r() {
        let mut outer = ChaCha8Rng::seed_from_u64(13);
        let imgs: Vec<Image> = (0..4).map(|_| random_image(shape(16, 16, 1), &mut outer)).collect();
        for kind in ALL_KINDS {
            let grid: Vec<f64> = (0..=5).map(|i| kind.max_param() * i as f64 / 5.0).collect();
            let mut last = -1.0;
            for &r in &grid {
                let mut rng = ChaCha8Rng::seed_from_u64(14);
                let spec = TransformSpec::new(kind, r).unwrap();
                let d = expected_distortion(&spec, &imgs, 300, &mut rng).unwrap();
                assert!(
                    d >= last - 0.05,
                    "{}: distortion decreased from {last} to {d} at r={r}",
                    kind.name()
                );
                last = d;
            }
        }
    }

    #[test]
    fn illegal_param_rejected() {
        assert!(TransformSpec::new(TransformKind::CropResize, 0.6).is_err());
        assert!(TransformSpec::new(TransformKind::Brightness, -0.1).is_err());
    }
}
