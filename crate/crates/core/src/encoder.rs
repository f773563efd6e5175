//! Similarity encoder: maps images to d-dimensional encodings where
//! perceptual similarity corresponds to small l2 distance. Trained by
//! contrastive fine-tuning of a classifier-pretrained network, with
//! positives generated by the calibrated blinding transforms.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fp16::round_f16;
use crate::models::{Dataset, Image};
use crate::numerics::{
    forward, loss_and_grads, Activation, LayerSpec, LossBatch, NetModel, OptimConfig, SgdOptimizer, Tensor,
};
use crate::transforms::{apply, TransformSpec};

/// d-dimensional encoding of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub values: Vec<f64>,
}

impl Encoding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Round through 16-bit storage precision (2*d bytes per query).
    pub fn to_storage_precision(&self) -> Encoding {
        Encoding {
            values: self.values.iter().map(|&v| round_f16(v)).collect(),
        }
    }

    pub fn storage_bytes(&self) -> usize {
        2 * self.values.len()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Encoding dimension d.
    pub d: usize,
    /// Contrastive margin m.
    pub margin: f64,
    /// Fine-tuning hyperparameters.
    pub fine_tune: OptimConfig,
    /// Calibrated transform set used to generate positive pairs.
    pub transforms: Vec<TransformSpec>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::InvalidConfig("margin must be > 0".into()));
        }
        if self.d == 0 {
            return Err(Error::InvalidConfig("encoding dim must be positive".into()));
        }
        if self.transforms.is_empty() {
            return Err(Error::InvalidConfig("need at least one positive transform".into()));
        }
        self.fine_tune.validate()
    }
}

/// One batch of b positive pairs (x, T(x)) and b negative pairs of distinct
/// images.
pub struct PairBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub others: Tensor,
    pub negatives: Tensor,
}

pub fn make_pair_batch<R: Rng>(
    dataset: &Dataset,
    b: usize,
    transforms: &[TransformSpec],
    rng: &mut R,
) -> Result<PairBatch> {
    if dataset.len() < 2 {
        return Err(Error::InvalidInput("dataset must hold at least 2 distinct images".into()));
    }
    if transforms.is_empty() {
        return Err(Error::InvalidConfig("no transforms for positive pairs".into()));
    }
    let d = dataset.shape.dim();
    let mut anchors = Vec::with_capacity(b * d);
    let mut positives = Vec::with_capacity(b * d);
    let mut others = Vec::with_capacity(b * d);
    let mut negatives = Vec::with_capacity(b * d);
    for _ in 0..b {
        let i = rng.gen_range(0..dataset.len());
        let spec = transforms[rng.gen_range(0..transforms.len())];
        let transformed = apply(&spec, &dataset.images[i], rng)?;
        anchors.extend_from_slice(dataset.images[i].pixels());
        positives.extend_from_slice(transformed.pixels());
        let j = rng.gen_range(0..dataset.len());
        let mut n = rng.gen_range(0..dataset.len());
        while n == j {
            n = rng.gen_range(0..dataset.len());
        }
        others.extend_from_slice(dataset.images[j].pixels());
        negatives.extend_from_slice(dataset.images[n].pixels());
    }
    Ok(PairBatch {
        anchors: Tensor::new(anchors, vec![b, d])?,
        positives: Tensor::new(positives, vec![b, d])?,
        others: Tensor::new(others, vec![b, d])?,
        negatives: Tensor::new(negatives, vec![b, d])?,
    })
}

/// Build the encoder from classifier-pretrained weights: keep every layer but
/// the last, replace the classification head with a fresh d-dimensional
/// encoding layer, then fine-tune the whole network with the contrastive
/// loss.
pub fn train_encoder(dataset: &Dataset, pretrained: &NetModel, config: &EncoderConfig) -> Result<NetModel> {
    config.validate()?;
    let mut rng = crate::rng::RootSeed(config.fine_tune.seed).stream("encoder-train");
    let n_layers = pretrained.layers().len();
    if n_layers == 0 {
        return Err(Error::InvalidInput("pretrained model has no layers".into()));
    }
    let mut layers: Vec<LayerSpec> = pretrained.layers()[..n_layers - 1].to_vec();
    let mut weights: Vec<_> = pretrained.weights()[..n_layers - 1].to_vec();
    let penultimate = layers
        .last()
        .map(|l| l.output_dim)
        .unwrap_or(pretrained.input_dim());
    let head = LayerSpec {
        input_dim: penultimate,
        output_dim: config.d,
        activation: Activation::Identity,
    };
    let fresh = NetModel::init(vec![head], &mut rng)?;
    layers.push(head);
    weights.push(fresh.weights()[0].clone());
    let mut encoder = NetModel::new(layers, weights)?;

    let mut opt = SgdOptimizer::from_config(&config.fine_tune);
    let batches_per_epoch = (dataset.len() / config.fine_tune.batch_size).max(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..config.fine_tune.epochs {
        order.shuffle(&mut rng);
        for _ in 0..batches_per_epoch {
            let batch = make_pair_batch(dataset, config.fine_tune.batch_size, &config.transforms, &mut rng)?;
            let (_, grads) = loss_and_grads(
                &encoder,
                &LossBatch::Contrastive {
                    anchors: &batch.anchors,
                    positives: &batch.positives,
                    others: &batch.others,
                    negatives: &batch.negatives,
                    margin: config.margin,
                },
            )?;
            opt.step(&mut encoder, &grads)?;
        }
    }
    let proj_dim = config.d / 2;
    widen_with_projection_channel(&mut encoder, proj_dim, dataset.shape)?;
    append_whitening_layer(&mut encoder, dataset, config.d + proj_dim)?;
    Ok(encoder)
}

/// Total encoding dimension produced by `train_encoder` for a configured
/// contrastive dimension d (contrastive channel plus geometric channel).
pub fn encoding_dim(d: usize) -> usize {
    d + d / 2
}

/// Widen the trained contrastive network with a fixed low-frequency skip
/// channel: the final encoding becomes [contrastive(x); P x] where the rows
/// of P are the lowest-frequency 2-D cosine basis functions (DC excluded).
/// The contrastive channel alone is free to discard most of the image's
/// idiosyncratic detail (the loss only needs a few directions to satisfy its
/// margins), which makes benign k-NN distances keep growing in k; the
/// geometric channel anchors the encoding to input geometry so benign
/// neighborhoods stay high-dimensional. Using smooth basis functions rather
/// than a white random projection matters for adaptive attackers: after
/// whitening, the channel responds strongly to image content (large benign
/// variance per dimension) but weakly to the high-frequency noise an
/// attacker injects to blind queries, and not at all to global brightness.
///
/// The projection rides through the ReLU layers exactly via a large positive
/// bias added at the first layer and subtracted at the head, so the existing
/// sequential forward pass needs no changes.
fn widen_with_projection_channel(encoder: &mut NetModel, p: usize, shape: crate::models::ImageShape) -> Result<()> {
    if p == 0 {
        return Ok(());
    }
    let input_dim = encoder.layers()[0].input_dim;
    // Frequency pairs (kx, ky) != (0, 0) ordered by kx^2 + ky^2.
    let mut freqs: Vec<(usize, usize)> = (0..shape.w)
        .flat_map(|kx| (0..shape.h).map(move |ky| (kx, ky)))
        .filter(|&(kx, ky)| kx + ky > 0)
        .collect();
    freqs.sort_by_key(|&(kx, ky)| (kx * kx + ky * ky, kx));
    let proj: Vec<Vec<f64>> = freqs
        .iter()
        .take(p)
        .map(|&(kx, ky)| {
            let mut row = Vec::with_capacity(input_dim);
            for _ch in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        let cx = (std::f64::consts::PI * kx as f64 * (x as f64 + 0.5) / shape.w as f64).cos();
                        let cy = (std::f64::consts::PI * ky as f64 * (y as f64 + 0.5) / shape.h as f64).cos();
                        row.push(cx * cy);
                    }
                }
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
            row
        })
        .collect();
    if proj.len() < p {
        return Err(Error::InvalidConfig("projection dim exceeds basis size".into()));
    }
    // |row . x| <= ||row|| * ||x|| with ||row|| ~ 1 and pixels in [0,1]; a
    // bias of 100 keeps the channel strictly positive through every ReLU.
    let n_layers = encoder.layers().len();
    let lift = if n_layers == 1 { 0.0 } else { 100.0 };

    let mut layers = Vec::with_capacity(n_layers);
    let mut weights = Vec::with_capacity(n_layers);
    for (idx, (spec, w)) in encoder.layers().iter().zip(encoder.weights()).enumerate() {
        let first = idx == 0;
        let last = idx == n_layers - 1;
        let in_dim = spec.input_dim + if first { 0 } else { p };
        let out_dim = spec.output_dim + p;
        let mut matrix = vec![0.0; in_dim * out_dim];
        for i in 0..spec.input_dim {
            for j in 0..spec.output_dim {
                matrix[i * out_dim + j] = w.matrix.data()[i * spec.output_dim + j];
            }
        }
        if first {
            for j in 0..p {
                for i in 0..input_dim {
                    matrix[i * out_dim + spec.output_dim + j] = proj[j][i];
                }
            }
        } else {
            for j in 0..p {
                matrix[(spec.input_dim + j) * out_dim + spec.output_dim + j] = 1.0;
            }
        }
        let mut bias: Vec<f64> = w.bias.data().to_vec();
        bias.extend(std::iter::repeat(if first { lift } else { 0.0 }).take(p));
        if last {
            for b in bias[spec.output_dim..].iter_mut() {
                *b -= lift;
            }
        }
        layers.push(LayerSpec {
            input_dim: in_dim,
            output_dim: out_dim,
            activation: spec.activation,
        });
        weights.push(crate::numerics::LayerWeights {
            matrix: Tensor::new(matrix, vec![in_dim, out_dim])?,
            bias: Tensor::new(bias, vec![out_dim])?,
        });
    }
    *encoder = NetModel::new(layers, weights)?;
    Ok(())
}

/// Append a fixed affine whitening layer so that l2 in encoding space is the
/// Mahalanobis distance of the raw contrastive embedding over the training
/// population. Without it a handful of dominant embedding directions carry
/// almost all benign variance and k-NN distances never plateau in k; after
/// whitening every direction contributes equally. Total variance is preserved
/// so downstream thresholds stay on the same scale.
fn append_whitening_layer(encoder: &mut NetModel, dataset: &Dataset, d: usize) -> Result<()> {
    use nalgebra::{DMatrix, DVector, SymmetricEigen};

    let n = dataset.len();
    let mut encs = Vec::with_capacity(n);
    for image in &dataset.images {
        let trace = forward(encoder, &image.as_tensor())?;
        encs.push(trace.output().row(0).to_vec());
    }
    let mut mean = DVector::zeros(d);
    for e in &encs {
        mean += DVector::from_row_slice(e);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for e in &encs {
        let c = DVector::from_row_slice(e) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n as f64;

    let eig = SymmetricEigen::new(cov);
    let total: f64 = eig.eigenvalues.iter().sum();
    let scale = (total / d as f64).sqrt();
    // Clamp tiny eigenvalues so near-dead directions are not amplified into
    // pure quantization noise.
    let floor = (total / d as f64) * 1e-3;
    let inv_sqrt = DVector::from_iterator(d, eig.eigenvalues.iter().map(|&l| scale / l.max(floor).sqrt()));
    // Row-vector convention: y = (x - mu) V diag(scale/sqrt(lambda)).
    let w = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt);
    let bias = -(mean.transpose() * &w);

    let spec = LayerSpec {
        input_dim: d,
        output_dim: d,
        activation: Activation::Identity,
    };
    let weights = crate::numerics::LayerWeights {
        matrix: Tensor::new(w.transpose().iter().cloned().collect(), vec![d, d])?,
        bias: Tensor::new(bias.iter().cloned().collect(), vec![d])?,
    };
    let mut layers = encoder.layers().to_vec();
    let mut all_weights = encoder.weights().to_vec();
    layers.push(spec);
    all_weights.push(weights);
    *encoder = NetModel::new(layers, all_weights)?;
    Ok(())
}

/// Deterministic forward pass through the encoder.
pub fn encode(encoder: &NetModel, image: &Image) -> Result<Encoding> {
    let trace = forward(encoder, &image.as_tensor())?;
    Ok(Encoding {
        values: trace.output().row(0).to_vec(),
    })
}

/// Fraction of triples (x, T(x), x') where the transformed copy is closer in
/// encoding space than the unrelated image. The testable core of the
/// similarity property.
pub fn separation_rate<R: Rng>(
    encoder: &NetModel,
    dataset: &Dataset,
    transforms: &[TransformSpec],
    triples: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut hits = 0usize;
    for _ in 0..triples {
        let i = rng.gen_range(0..dataset.len());
        let mut j = rng.gen_range(0..dataset.len());
        while j == i {
            j = rng.gen_range(0..dataset.len());
        }
        let spec = transforms[rng.gen_range(0..transforms.len())];
        let t = apply(&spec, &dataset.images[i], rng)?;
        let e = encode(encoder, &dataset.images[i])?;
        let ep = encode(encoder, &t)?;
        let en = encode(encoder, &dataset.images[j])?;
        let pos = crate::numerics::l2_dist(&e.values, &ep.values);
        let neg = crate::numerics::l2_dist(&e.values, &en.values);
        if pos < neg {
            hits += 1;
        }
    }
    Ok(hits as f64 / triples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ImageShape;
    use crate::transforms::TransformKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let sh = ImageShape { h: 4, w: 4, c: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<Image> = (0..n)
            .map(|_| {
                let px: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
                Image::new(px, sh).unwrap()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        Dataset::new(images, labels, 2, sh).unwrap()
    }

    fn brightness_only() -> Vec<TransformSpec> {
        vec![TransformSpec::new(TransformKind::Brightness, 0.05).unwrap()]
    }

    #[test]
    fn pair_batch_brightness_positive_is_constant_shift() {
        let ds = tiny_dataset(8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = make_pair_batch(&ds, 1, &brightness_only(), &mut rng).unwrap();
        let a = batch.anchors.row(0);
        let p = batch.positives.row(0);
        // Constant shift wherever no clipping happened.
        let diffs: Vec<f64> = a
            .iter()
            .zip(p)
            .filter(|(_, &pv)| pv > 0.0 && pv < 1.0)
            .map(|(&av, &pv)| pv - av)
            .collect();
        assert!(diffs.len() > 4);
        for d in &diffs {
            assert!((d - diffs[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn negatives_never_self_paired() {
        let ds = tiny_dataset(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let batch = make_pair_batch(&ds, 100, &brightness_only(), &mut rng).unwrap();
            for i in 0..100 {
                assert_ne!(batch.others.row(i), batch.negatives.row(i));
            }
        }
    }

    #[test]
    fn pair_batch_reproducible_under_fixed_seed() {
        let ds = tiny_dataset(8, 5);
        let mut r1 = ChaCha8Rng::seed_from_u64(6);
        let mut r2 = ChaCha8Rng::seed_from_u64(6);
        let a = make_pair_batch(&ds, 4, &brightness_only(), &mut r1).unwrap();
        let b = make_pair_batch(&ds, 4, &brightness_only(), &mut r2).unwrap();
        assert_eq!(a.anchors.data(), b.anchors.data());
        assert_eq!(a.positives.data(), b.positives.data());
    }

    #[test]
    fn dataset_too_small_rejected() {
        let ds = tiny_dataset(1, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(make_pair_batch(&ds, 1, &brightness_only(), &mut rng).is_err());
    }

    #[test]
    fn encode_deterministic_with_dimension_d() {
        let ds = tiny_dataset(8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pre = NetModel::init(
            vec![
                LayerSpec { input_dim: 16, output_dim: 12, activation: Activation::Relu },
                LayerSpec { input_dim: 12, output_dim: 2, activation: Activation::SoftmaxLogits },
            ],
            &mut rng,
        )
        .unwrap();
        let cfg = EncoderConfig {
            d: 6,
            margin: 10f64.sqrt(),
            fine_tune: OptimConfig { learning_rate: 1e-3, momentum: 0.9, batch_size: 4, epochs: 1, seed: 11 },
            transforms: brightness_only(),
        };
        let enc = train_encoder(&ds, &pre, &cfg).unwrap();
        let e1 = encode(&enc, &ds.images[0]).unwrap();
        let e2 = encode(&enc, &ds.images[0]).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.dim(), encoding_dim(6));
        // Matches a plain forward-pass oracle.
        let trace = forward(&enc, &ds.images[0].as_tensor()).unwrap();
        assert_eq!(e1.values, trace.output().row(0));
    }

    #[test]
    fn storage_precision_is_two_bytes_per_value() {
        let e = Encoding { values: vec![0.123456789, -4.2, 1000.5] };
        let stored = e.to_storage_precision();
        assert_eq!(stored.storage_bytes(), 6);
        for (orig, st) in e.values.iter().zip(&stored.values) {
            assert!((orig - st).abs() / orig.abs() < 1e-2);
            // idempotent
            assert_eq!(round_f16(*st), *st);
        }
    }
}
