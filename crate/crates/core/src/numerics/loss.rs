use crate::error::{Error, Result};
use crate::numerics::net::{backward, forward, softmax, LayerWeights, NetModel};
use crate::numerics::tensor::{sq_dist, Tensor};

/// Batch inputs for the three supported loss kinds.
///
/// * `CrossEntropy`: classifier training; `labels` are class indices.
/// * `Contrastive`: siamese training of the similarity encoder; rows of
///   `anchors`/`positives` form similar pairs and rows of
///   `others`/`negatives` form dissimilar pairs.
/// * `Blinder`: auto-encoder blinding function training. The model under
///   training maps (image || noise) -> image; the fixed surrogate classifier
///   supplies the label-preservation term and the pairwise-distance term
///   pushes two noise draws of the same image apart, clamped at
///   `distance_target`.
pub enum LossBatch<'a> {
    CrossEntropy {
        inputs: &'a Tensor,
        labels: &'a [usize],
    },
    Contrastive {
        anchors: &'a Tensor,
        positives: &'a Tensor,
        others: &'a Tensor,
        negatives: &'a Tensor,
        margin: f64,
    },
    Blinder {
        surrogate: &'a NetModel,
        images: &'a Tensor,
        noise_a: &'a Tensor,
        noise_b: &'a Tensor,
        weight: f64,
        distance_target: f64,
    },
}

/// Loss value plus analytic gradients with the same shapes as the weights.
pub fn loss_and_grads(model: &NetModel, batch: &LossBatch) -> Result<(f64, Vec<LayerWeights>)> {
    match batch {
        LossBatch::CrossEntropy { inputs, labels } => cross_entropy(model, inputs, labels),
        LossBatch::Contrastive {
            anchors,
            positives,
            others,
            negatives,
            margin,
        } => contrastive(model, anchors, positives, others, negatives, *margin),
        LossBatch::Blinder {
            surrogate,
            images,
            noise_a,
            noise_b,
            weight,
            distance_target,
        } => blinder(model, surrogate, images, noise_a, noise_b, *weight, *distance_target),
    }
}

/// Loss value only (used by the finite-difference oracle).
pub fn loss_value(model: &NetModel, batch: &LossBatch) -> Result<f64> {
    loss_and_grads(model, batch).map(|(l, _)| l)
}

fn cross_entropy(model: &NetModel, inputs: &Tensor, labels: &[usize]) -> Result<(f64, Vec<LayerWeights>)> {
    let b = inputs.rows();
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} examples",
            labels.len(),
            b
        )));
    }
    let c = model.output_dim();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidInput(format!("label {bad} out of range (C={c})")));
    }
    let trace = forward(model, inputs)?;
    let probs = softmax(trace.output());
    let mut loss = 0.0;
    let mut grad_logits = Tensor::zeros(vec![b, c]);
    for i in 0..b {
        let p = probs.row(i);
        loss -= p[labels[i]].max(1e-300).ln();
        let g = grad_logits.row_mut(i);
        g.copy_from_slice(p);
        g[labels[i]] -= 1.0;
        for v in g.iter_mut() {
            *v /= b as f64;
        }
    }
    loss /= b as f64;
    let (grads, _) = backward(model, &trace, &grad_logits);
    Ok((loss, grads))
}

fn contrastive(
    model: &NetModel,
    anchors: &Tensor,
    positives: &Tensor,
    others: &Tensor,
    negatives: &Tensor,
    margin: f64,
) -> Result<(f64, Vec<LayerWeights>)> {
    if margin <= 0.0 {
        return Err(Error::InvalidConfig("contrastive margin must be > 0".into()));
    }
    let b = anchors.rows();
    if positives.rows() != b || others.rows() != b || negatives.rows() != b {
        return Err(Error::ShapeMismatch("contrastive pair counts differ".into()));
    }
    let ti = forward(model, anchors)?;
    let tp = forward(model, positives)?;
    let tj = forward(model, others)?;
    let tn = forward(model, negatives)?;
    let d = model.output_dim();
    let m2 = margin * margin;
    let mut loss = 0.0;
    let mut gi = Tensor::zeros(vec![b, d]);
    let mut gp = Tensor::zeros(vec![b, d]);
    let mut gj = Tensor::zeros(vec![b, d]);
    let mut gn = Tensor::zeros(vec![b, d]);
    for i in 0..b {
        let (ei, ep) = (ti.output().row(i), tp.output().row(i));
        let (ej, en) = (tj.output().row(i), tn.output().row(i));
        let pos = sq_dist(ei, ep);
        let neg = sq_dist(ej, en);
        loss += pos + (m2 - neg).max(0.0);
        for k in 0..d {
            let diff = 2.0 * (ei[k] - ep[k]) / b as f64;
            gi.row_mut(i)[k] = diff;
            gp.row_mut(i)[k] = -diff;
        }
        if neg < m2 {
            for k in 0..d {
                let diff = 2.0 * (ej[k] - en[k]) / b as f64;
                gj.row_mut(i)[k] = -diff;
                gn.row_mut(i)[k] = diff;
            }
        }
    }
    loss /= b as f64;
    let mut grads = model.zero_grads();
    for (trace, g) in [(&ti, &gi), (&tp, &gp), (&tj, &gj), (&tn, &gn)] {
        let (part, _) = backward(model, trace, g);
        accumulate(&mut grads, &part);
    }
    Ok((loss, grads))
}

fn blinder(
    model: &NetModel,
    surrogate: &NetModel,
    images: &Tensor,
    noise_a: &Tensor,
    noise_b: &Tensor,
    weight: f64,
    distance_target: f64,
) -> Result<(f64, Vec<LayerWeights>)> {
    let b = images.rows();
    if noise_a.rows() != b || noise_b.rows() != b {
        return Err(Error::ShapeMismatch("noise batch size differs from images".into()));
    }
    let img_dim = images.cols();
    if model.output_dim() != img_dim {
        return Err(Error::ShapeMismatch("blinder output dim != image dim".into()));
    }
    if surrogate.input_dim() != img_dim {
        return Err(Error::ShapeMismatch("surrogate input dim != image dim".into()));
    }
    let in_a = concat_rows(images, noise_a)?;
    let in_b = concat_rows(images, noise_b)?;
    let ta = forward(model, &in_a)?;
    let tb = forward(model, &in_b)?;
    let out_a = ta.output();
    let out_b = tb.output();

    // Label-preservation term: cross-entropy between the surrogate's
    // distribution on the clean image (target, no gradient) and on the
    // blinded image.
    let s_clean = forward(surrogate, images)?;
    let target = softmax(s_clean.output());
    let s_a = forward(surrogate, out_a)?;
    let p_a = softmax(s_a.output());
    let c = surrogate.output_dim();
    let mut loss = 0.0;
    let mut grad_logits = Tensor::zeros(vec![b, c]);
    for i in 0..b {
        let q = target.row(i);
        let p = p_a.row(i);
        for k in 0..c {
            loss -= q[k] * p[k].max(1e-300).ln();
        }
        let g = grad_logits.row_mut(i);
        for k in 0..c {
            g[k] = (p[k] - q[k]) / b as f64;
        }
    }
    // Gradient w.r.t. the blinded image, through the fixed surrogate.
    let (_, grad_out_a_ce) = backward(surrogate, &s_a, &grad_logits);

    // Pairwise-distance term, clamped at distance_target^2 with zero gradient
    // beyond the clamp.
    let d2 = distance_target * distance_target;
    let dim = img_dim;
    let mut grad_out_a = grad_out_a_ce;
    let mut grad_out_b = Tensor::zeros(vec![b, dim]);
    let mut dist_term = 0.0;
    for i in 0..b {
        let (oa, ob) = (out_a.row(i), out_b.row(i));
        let s = sq_dist(oa, ob);
        dist_term += s.min(d2);
        if s < d2 {
            for k in 0..dim {
                let diff = 2.0 * weight * (oa[k] - ob[k]) / b as f64;
                grad_out_a.row_mut(i)[k] -= diff;
                grad_out_b.row_mut(i)[k] += diff;
            }
        }
    }
    loss = loss / b as f64 - weight * dist_term / b as f64;

    let mut grads = model.zero_grads();
    let (part_a, _) = backward(model, &ta, &grad_out_a);
    accumulate(&mut grads, &part_a);
    let (part_b, _) = backward(model, &tb, &grad_out_b);
    accumulate(&mut grads, &part_b);
    Ok((loss, grads))
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let rows = a.rows();
    let (ca, cb) = (a.cols(), b.cols());
    let mut data = Vec::with_capacity(rows * (ca + cb));
    for i in 0..rows {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::new(data, vec![rows, ca + cb])
}

pub(crate) fn accumulate(into: &mut [LayerWeights], part: &[LayerWeights]) {
    for (dst, src) in into.iter_mut().zip(part) {
        for (d, s) in dst.matrix.data_mut().iter_mut().zip(src.matrix.data()) {
            *d += s;
        }
        for (d, s) in dst.bias.data_mut().iter_mut().zip(src.bias.data()) {
            *d += s;
        }
    }
}

/// Maximum relative error between analytic gradients and central finite
/// differences (step `step` on every weight). Test utility.
pub fn grad_check(model: &NetModel, batch: &LossBatch, step: f64) -> Result<f64> {
    let (_, grads) = loss_and_grads(model, batch)?;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    let n_layers = model.weights().len();
    for li in 0..n_layers {
        for part in 0..2 {
            let len = if part == 0 {
                model.weights()[li].matrix.len()
            } else {
                model.weights()[li].bias.len()
            };
            for idx in 0..len {
                let orig = get_w(&probe, li, part, idx);
                set_w(&mut probe, li, part, idx, orig + step);
                let up = loss_value(&probe, batch)?;
                set_w(&mut probe, li, part, idx, orig - step);
                let down = loss_value(&probe, batch)?;
                set_w(&mut probe, li, part, idx, orig);
                let numeric = (up - down) / (2.0 * step);
                let analytic = if part == 0 {
                    grads[li].matrix.data()[idx]
                } else {
                    grads[li].bias.data()[idx]
                };
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
    }
    Ok(worst)
}

fn get_w(m: &NetModel, li: usize, part: usize, idx: usize) -> f64 {
    if part == 0 {
        m.weights()[li].matrix.data()[idx]
    } else {
        m.weights()[li].bias.data()[idx]
    }
}

fn set_w(m: &mut NetModel, li: usize, part: usize, idx: usize, v: f64) {
    if part == 0 {
        m.weights_mut()[li].matrix.data_mut()[idx] = v;
    } else {
        m.weights_mut()[li].bias.data_mut()[idx] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::net::{Activation, LayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(dims: &[usize], seed: u64) -> NetModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<LayerSpec> = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                input_dim: w[0],
                output_dim: w[1],
                activation: if i + 2 == dims.len() { Activation::Identity } else { Activation::Relu },
            })
            .collect();
        NetModel::init(layers, &mut rng).unwrap()
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(data, vec![rows, cols]).unwrap()
    }

    #[test]
    fn perfect_logits_give_near_zero_loss_and_grads() {
        // Single identity layer; feed extreme one-hot logits.
        let net = random_net(&[3, 3], 1);
        let mut id = net.clone();
        for w in id.weights_mut() {
            for v in w.matrix.data_mut() {
                *v = 0.0;
            }
            for v in w.bias.data_mut() {
                *v = 0.0;
            }
        }
        let mut m = id.clone();
        for i in 0..3 {
            m.weights_mut()[0].matrix.data_mut()[i * 3 + i] = 1.0;
        }
        let inputs = Tensor::from_rows(&[vec![50.0, 0.0, 0.0], vec![0.0, 50.0, 0.0]]).unwrap();
        let labels = [0usize, 1];
        let (loss, grads) = loss_and_grads(&m, &LossBatch::CrossEntropy { inputs: &inputs, labels: &labels }).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
        for g in &grads {
            assert!(g.matrix.data().iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn contrastive_zero_when_positives_equal_and_negatives_separated() {
        // Identity encoder: e = x. Positives identical, negatives >= m apart.
        let net = {
            let spec = LayerSpec { input_dim: 2, output_dim: 2, activation: Activation::Identity };
            let mut m = Tensor::zeros(vec![2, 2]);
            m.data_mut()[0] = 1.0;
            m.data_mut()[3] = 1.0;
            NetModel::new(vec![spec], vec![LayerWeights { matrix: m, bias: Tensor::zeros(vec![2]) }]).unwrap()
        };
        let a = Tensor::from_rows(&[vec![0.3, 0.7]]).unwrap();
        let j = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let n = Tensor::from_rows(&[vec![10.0, 0.0]]).unwrap();
        let (loss, _) = loss_and_grads(
            &net,
            &LossBatch::Contrastive { anchors: &a, positives: &a, others: &j, negatives: &n, margin: 2.0 },
        )
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn grad_check_cross_entropy() {
        for seed in [5u64, 6, 7] {
            let net = random_net(&[4, 6, 3], seed);
            let inputs = random_batch(5, 4, seed + 100);
            let labels = vec![0usize, 1, 2, 0, 1];
            let err = grad_check(&net, &LossBatch::CrossEntropy { inputs: &inputs, labels: &labels }, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn grad_check_contrastive() {
        for seed in [8u64, 9, 10] {
            let net = random_net(&[4, 6, 3], seed);
            let a = random_batch(4, 4, seed + 1);
            let p = random_batch(4, 4, seed + 2);
            let j = random_batch(4, 4, seed + 3);
            let n = random_batch(4, 4, seed + 4);
            let err = grad_check(
                &net,
                &LossBatch::Contrastive { anchors: &a, positives: &p, others: &j, negatives: &n, margin: 1.5 },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn grad_check_blinder() {
        for seed in [11u64, 12, 13] {
            let surrogate = random_net(&[6, 8, 3], seed + 50);
            let blinder_net = random_net(&[8, 10, 6], seed);
            let images = random_batch(3, 6, seed + 1);
            let na = random_batch(3, 2, seed + 2);
            let nb = random_batch(3, 2, seed + 3);
            let err = grad_check(
                &blinder_net,
                &LossBatch::Blinder {
                    surrogate: &surrogate,
                    images: &images,
                    noise_a: &na,
                    noise_b: &nb,
                    weight: 1.0,
                    distance_target: 10.0,
                },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn corrupted_gradient_fails_grad_check() {
        let net = random_net(&[3, 4, 2], 20);
        let inputs = random_batch(4, 3, 21);
        let labels = vec![0usize, 1, 0, 1];
        let batch = LossBatch::CrossEntropy { inputs: &inputs, labels: &labels };
        let (_, mut grads) = loss_and_grads(&net, &batch).unwrap();
        grads[0].matrix.data_mut()[0] += 1.0;
        // Re-run grad_check against a numeric baseline by hand: corrupting the
        // analytic gradient must produce a large relative error.
        let step = 1e-5;
        let mut probe = net.clone();
        let orig = probe.weights()[0].matrix.data()[0];
        probe.weights_mut()[0].matrix.data_mut()[0] = orig + step;
        let up = loss_value(&probe, &batch).unwrap();
        probe.weights_mut()[0].matrix.data_mut()[0] = orig - step;
        let down = loss_value(&probe, &batch).unwrap();
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads[0].matrix.data()[0];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(err > 1e-4);
    }

    #[test]
    fn unknown_label_rejected() {
        let net = random_net(&[3, 2], 30);
        let inputs = random_batch(1, 3, 31);
        let labels = vec![5usize];
        assert!(loss_and_grads(&net, &LossBatch::CrossEntropy { inputs: &inputs, labels: &labels }).is_err());
    }
}
