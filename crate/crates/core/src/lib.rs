//! Stateful detection of query-based black-box adversarial attacks.
//!
//! The crate pairs a defender (similarity encoder + k-NN query-history
//! detector behind an account-oriented gateway) with the attack suite used
//! to evaluate it (NES, boundary following, hybrid surrogate, query
//! blinding) and an experiment harness with an attack-economics model.

pub mod attacks;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod fp16;
pub mod gateway;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod transforms;

pub use error::{Error, Result};
pub use rng::RootSeed;
