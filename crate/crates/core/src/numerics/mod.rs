//! Dense-tensor and feedforward-network substrate with exact analytic
//! gradients for the three loss kinds used across the crate.

pub mod io;
pub mod loss;
pub mod net;
pub mod optim;
pub mod tensor;

pub use io::{load_model, read_model, save_model, write_model, ModelKind};
pub use loss::{grad_check, loss_and_grads, loss_value, LossBatch};
pub use net::{backward, forward, softmax, Activation, ForwardTrace, LayerSpec, LayerWeights, NetModel};
pub use optim::{optimizer_step, OptimConfig, SgdOptimizer};
pub use tensor::{l2_dist, linf_dist, sq_dist, Tensor};
