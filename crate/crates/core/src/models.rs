//! Concrete networks: the defended classifier, the attacker's surrogate and
//! the blinding auto-encoder, together with the image/dataset types they
//! consume. Images are channel-planar row-major flat vectors in [0,1].

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    forward, loss_and_grads, softmax, Activation, LayerSpec, LossBatch, NetModel, OptimConfig, SgdOptimizer, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl ImageShape {
    pub fn dim(&self) -> usize {
        self.h * self.w * self.c
    }
}

/// Flat image vector in [0,1]^(h*w*c), channel-planar row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Vec<f64>,
    shape: ImageShape,
}

impl Image {
    pub fn new(pixels: Vec<f64>, shape: ImageShape) -> Result<Self> {
        if pixels.len() != shape.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for shape {}x{}x{}",
                pixels.len(),
                shape.h,
                shape.w,
                shape.c
            )));
        }
        if pixels.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("pixel outside [0,1]".into()));
        }
        Ok(Self { pixels, shape })
    }

    /// Clip an arbitrary vector into the valid image domain.
    pub fn clipped(mut pixels: Vec<f64>, shape: ImageShape) -> Result<Self> {
        for p in &mut pixels {
            if !p.is_finite() {
                return Err(Error::NonFinite("image".into()));
            }
            *p = p.clamp(0.0, 1.0);
        }
        Image::new(pixels, shape)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.pixels.len()
    }

    /// Planar index of (channel, row, col).
    pub fn idx(&self, ch: usize, y: usize, x: usize) -> usize {
        ch * self.shape.h * self.shape.w + y * self.shape.w + x
    }

    pub fn get(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.pixels[self.idx(ch, y, x)]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(self.pixels.clone(), vec![1, self.pixels.len()]).expect("valid image")
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub shape: ImageShape,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, class_count: usize, shape: ImageShape) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::ShapeMismatch("image/label count mismatch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidInput(format!("label {bad} >= class count {class_count}")));
        }
        if images.iter().any(|i| i.shape() != shape) {
            return Err(Error::ShapeMismatch("inconsistent image shapes".into()));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Batch tensor from a set of indices (rows are flattened images).
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let d = self.shape.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.images[i].pixels());
        }
        Tensor::new(data, vec![indices.len(), d]).expect("valid images")
    }

    /// Deterministic split by index: first `n` examples vs the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let head = Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
            shape: self.shape,
        };
        let tail = Dataset {
            images: self.images[n..].to_vec(),
            labels: self.labels[n..].to_vec(),
            class_count: self.class_count,
            shape: self.shape,
        };
        (head, tail)
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub holdout_fraction: f64,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: NetModel,
    pub holdout_accuracy: f64,
}

/// Train a softmax classifier with mini-batch momentum SGD, reporting
/// held-out accuracy on a shuffled split.
pub fn train_classifier(dataset: &Dataset, config: &ClassifierConfig) -> Result<TrainedClassifier> {
    config.optim.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let first = dataset.labels[0];
    if dataset.labels.iter().all(|&l| l == first) {
        return Err(Error::InvalidInput("degenerate single-class dataset".into()));
    }
    let mut rng = crate::rng::RootSeed(config.optim.seed).stream("classifier-train");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let holdout = ((dataset.len() as f64) * config.holdout_fraction).round() as usize;
    let (eval_idx, train_idx) = order.split_at(holdout.min(dataset.len().saturating_sub(1)));

    let mut dims = vec![dataset.shape.dim()];
    dims.extend_from_slice(&config.hidden);
    dims.push(dataset.class_count);
    let layers: Vec<LayerSpec> = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| LayerSpec {
            input_dim: w[0],
            output_dim: w[1],
            activation: if i + 2 == dims.len() {
                Activation::SoftmaxLogits
            } else {
                Activation::Relu
            },
        })
        .collect();
    let mut model = NetModel::init(layers, &mut rng)?;
    let mut opt = SgdOptimizer::from_config(&config.optim);
    let mut train: Vec<usize> = train_idx.to_vec();
    for _ in 0..config.optim.epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(config.optim.batch_size) {
            let inputs = dataset.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let (_, grads) = loss_and_grads(&model, &LossBatch::CrossEntropy { inputs: &inputs, labels: &labels })?;
            opt.step(&mut model, &grads)?;
        }
    }
    let holdout_accuracy = if eval_idx.is_empty() {
        0.0
    } else {
        let correct = eval_idx
            .iter()
            .filter(|&&i| classify(&model, &dataset.images[i]).unwrap() == dataset.labels[i])
            .count();
        correct as f64 / eval_idx.len() as f64
    };
    Ok(TrainedClassifier {
        model,
        holdout_accuracy,
    })
}

/// Hard label: argmax of the softmax output, ties broken by lowest index.
pub fn classify(model: &NetModel, image: &Image) -> Result<usize> {
    let probs = classify_soft(model, image)?;
    Ok(argmax(&probs))
}

/// Full probability vector.
pub fn classify_soft(model: &NetModel, image: &Image) -> Result<Vec<f64>> {
    let trace = forward(model, &image.as_tensor())?;
    Ok(softmax(trace.output()).row(0).to_vec())
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
        let _ = i;
    }
    best
}

/// Randomized blinding auto-encoder mapping (image || noise) -> image.
#[derive(Debug, Clone)]
pub struct Blinder {
    pub net: NetModel,
    pub noise_dim: usize,
    /// Desired pairwise distance d between two blinded draws.
    pub distance_target: f64,
    /// Relative weight c of the pairwise-distance loss term.
    pub weight: f64,
}

/// Desk-scale default for the blinder distance target, scaling the
/// CIFAR-sized value of 10 by the per-pixel distortion density.
pub fn default_blinder_distance(image_dim: usize) -> f64 {
    10.0 * (image_dim as f64 / 3072.0).sqrt()
}

#[derive(Debug, Clone)]
pub struct BlinderConfig {
    pub noise_dim: usize,
    pub hidden: Vec<usize>,
    pub distance_target: f64,
    pub weight: f64,
    pub optim: OptimConfig,
}

/// Train the blinding auto-encoder against a surrogate classifier. By
/// interface, only the surrogate is accepted here; the defended classifier's
/// weights never reach this function.
pub fn train_blinder(train_images: &[Image], surrogate: &NetModel, config: &BlinderConfig) -> Result<Blinder> {
    config.optim.validate()?;
    let first = train_images
        .first()
        .ok_or_else(|| Error::InvalidInput("no training images".into()))?;
    let d = first.dim();
    if surrogate.input_dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "surrogate input dim {} != image dim {}",
            surrogate.input_dim(),
            d
        )));
    }
    if config.noise_dim == 0 {
        return Err(Error::InvalidConfig("noise dim must be positive".into()));
    }
    let mut rng = crate::rng::RootSeed(config.optim.seed).stream("blinder-train");
    let mut dims = vec![d + config.noise_dim];
    dims.extend_from_slice(&config.hidden);
    dims.push(d);
    let layers: Vec<LayerSpec> = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| LayerSpec {
            input_dim: w[0],
            output_dim: w[1],
            activation: if i + 2 == dims.len() { Activation::Identity } else { Activation::Relu },
        })
        .collect();
    let mut net = NetModel::init(layers, &mut rng)?;
    let mut opt = SgdOptimizer::from_config(&config.optim);
    let mut order: Vec<usize> = (0..train_images.len()).collect();
    for _ in 0..config.optim.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.optim.batch_size) {
            let mut img_data = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                img_data.extend_from_slice(train_images[i].pixels());
            }
            let images = Tensor::new(img_data, vec![chunk.len(), d])?;
            let noise_a = uniform_noise(chunk.len(), config.noise_dim, &mut rng);
            let noise_b = uniform_noise(chunk.len(), config.noise_dim, &mut rng);
            let (_, grads) = loss_and_grads(
                &net,
                &LossBatch::Blinder {
                    surrogate,
                    images: &images,
                    noise_a: &noise_a,
                    noise_b: &noise_b,
                    weight: config.weight,
                    distance_target: config.distance_target,
                },
            )?;
            opt.step(&mut net, &grads)?;
        }
    }
    Ok(Blinder {
        net,
        noise_dim: config.noise_dim,
        distance_target: config.distance_target,
        weight: config.weight,
    })
}

/// One blinded draw; the noise vector is i.i.d. uniform [0,1].
pub fn blind<R: Rng>(blinder: &Blinder, image: &Image, rng: &mut R) -> Result<Image> {
    let d = image.dim();
    if blinder.net.input_dim() != d + blinder.noise_dim {
        return Err(Error::ShapeMismatch("blinder input dim mismatch".into()));
    }
    let mut input = Vec::with_capacity(d + blinder.noise_dim);
    input.extend_from_slice(image.pixels());
    for _ in 0..blinder.noise_dim {
        input.push(rng.gen_range(0.0..1.0));
    }
    let batch = Tensor::new(input, vec![1, d + blinder.noise_dim])?;
    let trace = forward(&blinder.net, &batch)?;
    Image::clipped(trace.output().row(0).to_vec(), image.shape())
}

fn uniform_noise<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(data, vec![rows, cols]).expect("finite noise")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(h: usize, w: usize, c: usize) -> ImageShape {
        ImageShape { h, w, c }
    }

    /// Linearly separable 2-class set: class by which half of the image is
    /// bright.
    fn separable_dataset(n: usize, seed: u64) -> Dataset {
        let sh = shape(4, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let mut px = vec![0.0; sh.dim()];
            for (j, p) in px.iter_mut().enumerate() {
                let bright = if label == 0 { j < 8 } else { j >= 8 };
                *p = if bright {
                    rng.gen_range(0.7..1.0)
                } else {
                    rng.gen_range(0.0..0.3)
                };
            }
            images.push(Image::new(px, sh).unwrap());
            labels.push(label);
        }
        Dataset::new(images, labels, 2, sh).unwrap()
    }

    fn quick_config(epochs: usize, seed: u64) -> ClassifierConfig {
        ClassifierConfig {
            hidden: vec![16],
            holdout_fraction: 0.25,
            optim: OptimConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                batch_size: 16,
                epochs,
                seed,
            },
        }
    }

    #[test]
    fn separable_dataset_reaches_high_accuracy() {
        let ds = separable_dataset(200, 1);
        let trained = train_classifier(&ds, &quick_config(20, 2)).unwrap();
        assert!(trained.holdout_accuracy >= 0.99, "accuracy {}", trained.holdout_accuracy);
    }

    #[test]
    fn single_class_dataset_rejected() {
        let mut ds = separable_dataset(10, 3);
        for l in &mut ds.labels {
            *l = 0;
        }
        assert!(train_classifier(&ds, &quick_config(1, 4)).is_err());
    }

    #[test]
    fn untrained_model_near_chance() {
        // Zero epochs is rejected by config validation; one epoch at zero-ish
        // learning rate approximates an untrained model instead. Labels are
        // shuffled so that no fixed decision rule can beat chance.
        let mut ds = separable_dataset(400, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        ds.labels.shuffle(&mut rng);
        let cfg = ClassifierConfig {
            hidden: vec![16],
            holdout_fraction: 0.5,
            optim: OptimConfig {
                learning_rate: 1e-12,
                momentum: 0.0,
                batch_size: 32,
                epochs: 1,
                seed: 6,
            },
        };
        let trained = train_classifier(&ds, &cfg).unwrap();
        assert!((trained.holdout_accuracy - 0.5).abs() < 0.25, "accuracy {}", trained.holdout_accuracy);
    }

    #[test]
    fn classify_matches_argmax_of_soft() {
        let ds = separable_dataset(100, 7);
        let trained = train_classifier(&ds, &quick_config(5, 8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let px: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let img = Image::new(px, shape(4, 4, 1)).unwrap();
            let soft = classify_soft(&trained.model, &img).unwrap();
            assert_eq!(classify(&trained.model, &img).unwrap(), argmax(&soft));
            let s: f64 = soft.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_tie_broken_by_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn soft_probs_match_forward_softmax_oracle() {
        let ds = separable_dataset(50, 10);
        let trained = train_classifier(&ds, &quick_config(2, 11)).unwrap();
        let img = &ds.images[0];
        let trace = forward(&trained.model, &img.as_tensor()).unwrap();
        let oracle = softmax(trace.output());
        let soft = classify_soft(&trained.model, img).unwrap();
        for (a, b) in soft.iter().zip(oracle.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blind_output_in_range_and_seed_deterministic() {
        let sh = shape(4, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let surrogate = NetModel::init(
            vec![LayerSpec { input_dim: 16, output_dim: 2, activation: Activation::SoftmaxLogits }],
            &mut rng,
        )
        .unwrap();
        let imgs: Vec<Image> = (0..8)
            .map(|_| {
                let px: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
                Image::new(px, sh).unwrap()
            })
            .collect();
        let cfg = BlinderConfig {
            noise_dim: 4,
            hidden: vec![12],
            distance_target: default_blinder_distance(16),
            weight: 1.0,
            optim: OptimConfig { learning_rate: 0.01, momentum: 0.9, batch_size: 4, epochs: 2, seed: 13 },
        };
        let blinder = train_blinder(&imgs, &surrogate, &cfg).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let a = blind(&blinder, &imgs[0], &mut r1).unwrap();
        let b = blind(&blinder, &imgs[0], &mut r2).unwrap();
        assert_eq!(a.pixels(), b.pixels());
        assert!(a.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let mut r3 = ChaCha8Rng::seed_from_u64(100);
        let c = blind(&blinder, &imgs[0], &mut r3).unwrap();
        assert_ne!(a.pixels(), c.pixels());
    }

    #[test]
    fn surrogate_dim_mismatch_rejected() {
        let sh = shape(4, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let surrogate = NetModel::init(
            vec![LayerSpec { input_dim: 10, output_dim: 2, activation: Activation::SoftmaxLogits }],
            &mut rng,
        )
        .unwrap();
        let img = Image::new(vec![0.5; 16], sh).unwrap();
        let cfg = BlinderConfig {
            noise_dim: 4,
            hidden: vec![8],
            distance_target: 1.0,
            weight: 1.0,
            optim: OptimConfig { learning_rate: 0.01, momentum: 0.0, batch_size: 2, epochs: 1, seed: 15 },
        };
        assert!(train_blinder(&[img], &surrogate, &cfg).is_err());
    }
}
