//! Small-network pruning and adversarial-robustness toolkit.
//!
//! The crate trains MLP/CNN classifiers with a built-in reverse-mode autodiff
//! engine, generates PGD adversarial inputs, prunes parameters by magnitude,
//! gradient, random, or greedy-adversarial (GAP) scores, quantizes weights to
//! 8 bits, and measures clean / self-adversarial / transfer-attack accuracy
//! across compression ratios.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod prune;
pub mod quant;
pub mod scalar;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
