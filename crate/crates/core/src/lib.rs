//! Desk-scale deep-learning engine for studying quantization-aware training
//! as a regularizer against label noise.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod pruning;
pub mod quant;
pub mod regularization;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Seeded generator used everywhere randomness appears.
pub type Rng = rand_chacha::ChaCha8Rng;
