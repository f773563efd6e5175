use crate::error::{Error, Result};
use crate::numerics::net::{LayerWeights, NetModel};

/// SGD hyperparameters. `seed` feeds batch shuffling in the training loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0,1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Momentum SGD with per-weight velocity state:
/// v <- mu * v + g ; theta <- theta - lr * v.
/// With momentum 0 this is exactly theta <- theta - lr * g.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    learning_rate: f64,
    momentum: f64,
    velocity: Option<Vec<LayerWeights>>,
}

impl SgdOptimizer {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn from_config(config: &OptimConfig) -> Self {
        Self::new(config.learning_rate, config.momentum)
    }

    pub fn step(&mut self, model: &mut NetModel, grads: &[LayerWeights]) -> Result<()> {
        if grads.len() != model.weights().len() {
            return Err(Error::ShapeMismatch("gradient layer count mismatch".into()));
        }
        let velocity = self.velocity.get_or_insert_with(|| model.zero_grads());
        for ((w, g), v) in model.weights_mut().iter_mut().zip(grads).zip(velocity.iter_mut()) {
            if w.matrix.len() != g.matrix.len() || w.bias.len() != g.bias.len() {
                return Err(Error::ShapeMismatch("gradient shape mismatch".into()));
            }
            for ((wv, gv), vv) in w
                .matrix
                .data_mut()
                .iter_mut()
                .zip(g.matrix.data())
                .zip(v.matrix.data_mut())
            {
                *vv = self.momentum * *vv + gv;
                *wv -= self.learning_rate * *vv;
            }
            for ((wv, gv), vv) in w.bias.data_mut().iter_mut().zip(g.bias.data()).zip(v.bias.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *wv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}

/// One stateless SGD step (fresh velocity), per the plain update rule.
pub fn optimizer_step(model: &NetModel, grads: &[LayerWeights], config: &OptimConfig) -> Result<NetModel> {
    config.validate()?;
    let mut updated = model.clone();
    let mut opt = SgdOptimizer::from_config(config);
    opt.step(&mut updated, grads)?;
    Ok(updated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::net::{Activation, LayerSpec};
    use crate::numerics::tensor::Tensor;

    fn one_weight_model(w: f64) -> NetModel {
        let spec = LayerSpec { input_dim: 1, output_dim: 1, activation: Activation::Identity };
        NetModel::new(
            vec![spec],
            vec![LayerWeights {
                matrix: Tensor::new(vec![w], vec![1, 1]).unwrap(),
                bias: Tensor::new(vec![0.0], vec![1]).unwrap(),
            }],
        )
        .unwrap()
    }

    fn grad(g: f64) -> Vec<LayerWeights> {
        vec![LayerWeights {
            matrix: Tensor::new(vec![g], vec![1, 1]).unwrap(),
            bias: Tensor::zeros(vec![1]),
        }]
    }

    #[test]
    fn zero_learning_rate_rejected_but_tiny_rate_keeps_weights() {
        let model = one_weight_model(1.0);
        let cfg = OptimConfig { learning_rate: 0.0, momentum: 0.0, batch_size: 1, epochs: 1, seed: 0 };
        assert!(optimizer_step(&model, &grad(2.0), &cfg).is_err());
        // Zero gradient leaves weights unchanged at any rate.
        let cfg = OptimConfig { learning_rate: 0.1, momentum: 0.0, batch_size: 1, epochs: 1, seed: 0 };
        let m2 = optimizer_step(&model, &grad(0.0), &cfg).unwrap();
        assert_eq!(m2.weights()[0].matrix.data()[0], 1.0);
    }

    #[test]
    fn plain_sgd_step() {
        let model = one_weight_model(1.0);
        let cfg = OptimConfig { learning_rate: 0.1, momentum: 0.0, batch_size: 1, epochs: 1, seed: 0 };
        let m2 = optimizer_step(&model, &grad(2.0), &cfg).unwrap();
        assert!((m2.weights()[0].matrix.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_matches_hand_recursion() {
        // v1 = g1; w1 = w0 - lr*v1; v2 = mu*v1 + g2; w2 = w1 - lr*v2
        let (lr, mu) = (0.1, 0.9);
        let (g1, g2) = (2.0, -1.0);
        let mut model = one_weight_model(1.0);
        let mut opt = SgdOptimizer::new(lr, mu);
        opt.step(&mut model, &grad(g1)).unwrap();
        opt.step(&mut model, &grad(g2)).unwrap();
        let v1 = g1;
        let w1 = 1.0 - lr * v1;
        let v2 = mu * v1 + g2;
        let w2 = w1 - lr * v2;
        assert!((model.weights()[0].matrix.data()[0] - w2).abs() < 1e-15);
    }

    #[test]
    fn grad_shape_mismatch_rejected() {
        let mut model = one_weight_model(1.0);
        let bad = vec![LayerWeights {
            matrix: Tensor::zeros(vec![2, 1]),
            bias: Tensor::zeros(vec![1]),
        }];
        let mut opt = SgdOptimizer::new(0.1, 0.0);
        assert!(opt.step(&mut model, &bad).is_err());
    }
}
