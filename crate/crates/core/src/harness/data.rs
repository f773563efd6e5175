use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::models::{Dataset, Image, ImageShape};

/// Per-class wave orientations; class identity is recoverable from the
/// dominant spatial frequency.
fn class_frequency(class: usize) -> (f64, f64) {
    match class % 8 {
        0 => (1.0, 0.0),
        1 => (0.0, 1.0),
        2 => (1.0, 1.0),
        3 => (2.0, 0.0),
        4 => (0.0, 2.0),
        5 => (1.0, -1.0),
        6 => (2.0, 1.0),
        _ => (1.0, 2.0),
    }
}

/// Procedural stand-in for a natural-image corpus: smooth class-distinct
/// wave patterns with random phase and amplitude jitter plus pixel noise.
/// Deterministic per rng stream; labels balanced by round-robin assignment.
pub fn generate_synthetic_dataset<R: Rng>(
    shape: ImageShape,
    classes: usize,
    size: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidConfig("need at least two classes".into()));
    }
    if size == 0 {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let mut labels: Vec<usize> = (0..size).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let mut images = Vec::with_capacity(size);
    for &label in &labels {
        let (fx, fy) = class_frequency(label);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let amplitude = rng.gen_range(0.2..0.28);
        // Per-image texture: several low-amplitude waves at random continuous
        // orientations. This is what makes two images of the same class look
        // like distinct scenes rather than copies, so the image population has
        // genuinely high-dimensional variation (not just phase + noise).
        let texture: Vec<(f64, f64, f64, f64)> = (0..24)
            .map(|_| {
                let theta = rng.gen_range(0.0..2.0 * PI);
                let freq = rng.gen_range(0.5..3.5);
                (
                    freq * theta.cos(),
                    freq * theta.sin(),
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.02..0.04),
                )
            })
            .collect();
        let mut pixels = Vec::with_capacity(shape.dim());
        for _ch in 0..shape.c {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    let u = x as f64 / shape.w as f64;
                    let v = y as f64 / shape.h as f64;
                    let wave = (2.0 * PI * (fx * u + fy * v) + phase).sin();
                    let tex: f64 = texture
                        .iter()
                        .map(|&(tx, ty, ph, amp)| amp * (2.0 * PI * (tx * u + ty * v) + ph).sin())
                        .sum();
                    let noise = rng.gen_range(-0.1..0.1);
                    pixels.push((0.5 + amplitude * wave + tex + noise).clamp(0.0, 1.0));
                }
            }
        }
        images.push(Image::new(pixels, shape)?);
    }
    Dataset::new(images, labels, classes, shape)
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_CLASSES: usize = 10;

/// CIFAR-10 binary format: 3073-byte records, 1 label byte then 3072 pixel
/// bytes (channel-planar R,G,B, row-major), pixels scaled to [0,1] by /255.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "file size {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let shape = ImageShape { h: 32, w: 32, c: 3 };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("label byte {label} out of range")));
        }
        let pixels: Vec<f64> = record[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Image::new(pixels, shape)?);
        labels.push(label);
    }
    Dataset::new(images, labels, CIFAR_CLASSES, shape)
}
