use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Per-layer nonlinearity. `SoftmaxLogits` marks a layer whose raw outputs
/// are logits; the softmax itself is applied by whatever consumes them
/// (cross-entropy loss, [`softmax`]), keeping the forward pass linear there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    SoftmaxLogits,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
            Activation::SoftmaxLogits => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            2 => Ok(Activation::SoftmaxLogits),
            _ => Err(Error::Format(format!("unknown activation tag {tag}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

/// Weight matrix (input_dim x output_dim, row-major) plus bias for one layer.
/// Also reused as the container for per-layer gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub matrix: Tensor,
    pub bias: Tensor,
}

/// Fully-connected feedforward network. Immutable once trained; training code
/// replaces weights through `weights_mut`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetModel {
    layers: Vec<LayerSpec>,
    weights: Vec<LayerWeights>,
}

impl NetModel {
    pub fn new(layers: Vec<LayerSpec>, weights: Vec<LayerWeights>) -> Result<Self> {
        if layers.len() != weights.len() {
            return Err(Error::ShapeMismatch("layer/weight count mismatch".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim != w[1].input_dim {
                return Err(Error::ShapeMismatch(format!(
                    "layer dims do not chain: {} -> {}",
                    w[0].output_dim, w[1].input_dim
                )));
            }
        }
        for (spec, w) in layers.iter().zip(&weights) {
            if w.matrix.shape() != [spec.input_dim, spec.output_dim]
                || w.bias.shape() != [spec.output_dim]
            {
                return Err(Error::ShapeMismatch("weight shape does not match spec".into()));
            }
            if !w.matrix.is_finite() || !w.bias.is_finite() {
                return Err(Error::NonFinite("model weights".into()));
            }
        }
        Ok(Self { layers, weights })
    }

    /// Seeded init, uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn init<R: Rng>(layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let weights = layers
            .iter()
            .map(|spec| {
                let bound = 1.0 / (spec.input_dim as f64).sqrt();
                let m: Vec<f64> = (0..spec.input_dim * spec.output_dim)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                let b: Vec<f64> = (0..spec.output_dim).map(|_| rng.gen_range(-bound..bound)).collect();
                LayerWeights {
                    matrix: Tensor::new(m, vec![spec.input_dim, spec.output_dim]).unwrap(),
                    bias: Tensor::new(b, vec![spec.output_dim]).unwrap(),
                }
            })
            .collect();
        NetModel::new(layers, weights)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[LayerWeights] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [LayerWeights] {
        &mut self.weights
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.input_dim).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_dim).unwrap_or(0)
    }

    /// Zero-filled gradient containers matching the weight shapes.
    pub fn zero_grads(&self) -> Vec<LayerWeights> {
        self.layers
            .iter()
            .map(|spec| LayerWeights {
                matrix: Tensor::zeros(vec![spec.input_dim, spec.output_dim]),
                bias: Tensor::zeros(vec![spec.output_dim]),
            })
            .collect()
    }
}

/// Per-layer activations retained by a forward pass, as needed for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// inputs[i] is the input to layer i; inputs[n] is the network output.
    pub inputs: Vec<Tensor>,
    /// Pre-activation values z = xW + b for each layer.
    pub pre_activations: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor {
        self.inputs.last().expect("trace has at least the input")
    }
}

/// Forward pass for a batch (rows are examples). Deterministic.
pub fn forward(model: &NetModel, batch: &Tensor) -> Result<ForwardTrace> {
    if batch.cols() != model.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "batch inner dim {} != first layer input dim {}",
            batch.cols(),
            model.input_dim()
        )));
    }
    let b = batch.rows();
    let mut inputs = Vec::with_capacity(model.layers.len() + 1);
    let mut pre_activations = Vec::with_capacity(model.layers.len());
    let mut current = if batch.shape().len() == 1 {
        Tensor::new(batch.data().to_vec(), vec![1, batch.cols()])?
    } else {
        batch.clone()
    };
    for (spec, w) in model.layers.iter().zip(&model.weights) {
        let (din, dout) = (spec.input_dim, spec.output_dim);
        let mut z = vec![0.0; b * dout];
        for i in 0..b {
            let x = current.row(i);
            let out = &mut z[i * dout..(i + 1) * dout];
            out.copy_from_slice(w.bias.data());
            for (k, &xk) in x.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let wrow = &w.matrix.data()[k * dout..(k + 1) * dout];
                for (o, &wv) in out.iter_mut().zip(wrow) {
                    *o += xk * wv;
                }
            }
        }
        let z = Tensor::new(z, vec![b, dout])?;
        let a = match spec.activation {
            Activation::Relu => {
                let mut d = z.data().to_vec();
                for v in &mut d {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                Tensor::new(d, vec![b, dout])?
            }
            Activation::Identity | Activation::SoftmaxLogits => z.clone(),
        };
        let _ = din;
        inputs.push(current);
        pre_activations.push(z);
        current = a;
    }
    inputs.push(current);
    Ok(ForwardTrace {
        inputs,
        pre_activations,
    })
}

/// Backprop a gradient w.r.t. the network output through a retained trace.
/// Returns per-layer weight gradients and the gradient w.r.t. the input batch.
pub fn backward(model: &NetModel, trace: &ForwardTrace, grad_output: &Tensor) -> (Vec<LayerWeights>, Tensor) {
    let b = trace.output().rows();
    let mut grads = model.zero_grads();
    let mut delta = grad_output.clone(); // gradient w.r.t. layer activation output
    for (li, spec) in model.layers.iter().enumerate().rev() {
        let dout = spec.output_dim;
        let din = spec.input_dim;
        // through the activation
        if spec.activation == Activation::Relu {
            let z = &trace.pre_activations[li];
            let d = delta.data_mut();
            for (dv, &zv) in d.iter_mut().zip(z.data()) {
                if zv <= 0.0 {
                    *dv = 0.0;
                }
            }
        }
        let input = &trace.inputs[li];
        let LayerWeights { matrix, bias } = &mut grads[li];
        let gm = matrix.data_mut();
        let gb = bias.data_mut();
        let mut grad_in = vec![0.0; b * din];
        for i in 0..b {
            let x = input.row(i);
            let dz = delta.row(i);
            for (o, &dzo) in dz.iter().enumerate() {
                gb[o] += dzo;
            }
            for (k, &xk) in x.iter().enumerate() {
                let grow = &mut gm[k * dout..(k + 1) * dout];
                let wrow = &model.weights[li].matrix.data()[k * dout..(k + 1) * dout];
                let gi = &mut grad_in[i * din + k];
                for (o, &dzo) in dz.iter().enumerate() {
                    grow[o] += xk * dzo;
                    *gi += wrow[o] * dzo;
                }
            }
        }
        delta = Tensor::new(grad_in, vec![b, din]).expect("finite grads");
    }
    (grads, delta)
}

/// Row-wise softmax of a logits matrix, numerically stabilised.
pub fn softmax(logits: &Tensor) -> Tensor {
    let b = logits.rows();
    let c = logits.cols();
    let mut out = vec![0.0; b * c];
    for i in 0..b {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for (ov, &l) in o.iter_mut().zip(row) {
            *ov = (l - m).exp();
            sum += *ov;
        }
        for ov in o.iter_mut() {
            *ov /= sum;
        }
    }
    Tensor::new(out, vec![b, c]).expect("softmax is finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net(dim: usize) -> NetModel {
        let spec = LayerSpec {
            input_dim: dim,
            output_dim: dim,
            activation: Activation::Identity,
        };
        let mut m = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            m.data_mut()[i * dim + i] = 1.0;
        }
        NetModel::new(vec![spec], vec![LayerWeights { matrix: m, bias: Tensor::zeros(vec![dim]) }]).unwrap()
    }

    #[test]
    fn identity_layer_is_identity() {
        let net = identity_net(3);
        let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let out = forward(&net, &x).unwrap();
        assert_eq!(out.output().row(0), x.row(0));
    }

    #[test]
    fn relu_zeroes_all_negative_input() {
        let spec = LayerSpec {
            input_dim: 2,
            output_dim: 2,
            activation: Activation::Relu,
        };
        let mut m = Tensor::zeros(vec![2, 2]);
        m.data_mut()[0] = 1.0;
        m.data_mut()[3] = 1.0;
        let net = NetModel::new(vec![spec], vec![LayerWeights { matrix: m, bias: Tensor::zeros(vec![2]) }]).unwrap();
        let x = Tensor::from_rows(&[vec![-0.5, -3.0]]).unwrap();
        let out = forward(&net, &x).unwrap();
        assert_eq!(out.output().row(0), &[0.0, 0.0]);
    }

    // Independent naive matrix-multiply oracle for the two-layer forward pass.
    fn naive_two_layer(net: &NetModel, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (spec, w) in net.layers().iter().zip(net.weights()) {
            let mut next = vec![0.0; spec.output_dim];
            for o in 0..spec.output_dim {
                let mut acc = w.bias.data()[o];
                for k in 0..spec.input_dim {
                    acc += cur[k] * w.matrix.data()[k * spec.output_dim + o];
                }
                next[o] = acc;
            }
            if spec.activation == Activation::Relu {
                for v in &mut next {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = NetModel::init(
            vec![
                LayerSpec { input_dim: 5, output_dim: 7, activation: Activation::Relu },
                LayerSpec { input_dim: 7, output_dim: 3, activation: Activation::Identity },
            ],
            &mut rng,
        )
        .unwrap();
        let x: Vec<f64> = (0..5).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let batch = Tensor::from_rows(&[x.clone()]).unwrap();
        let got = forward(&net, &batch).unwrap();
        let want = naive_two_layer(&net, &x);
        for (g, w) in got.output().row(0).iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "got {g}, want {w}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = NetModel::init(
            vec![LayerSpec { input_dim: 4, output_dim: 4, activation: Activation::Relu }],
            &mut rng,
        )
        .unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let a = forward(&net, &x).unwrap();
        let b = forward(&net, &x).unwrap();
        assert_eq!(a.output().data(), b.output().data());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = identity_net(3);
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(forward(&net, &x).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-5.0, 0.0, 5.0]]).unwrap();
        let p = softmax(&logits);
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }
}
