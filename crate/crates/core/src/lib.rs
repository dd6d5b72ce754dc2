//! Training neural networks with a learned, adversarially robust update rule.
//!
//! The crate provides, bottom to top:
//!
//! - [`tensor`] / [`graph`]: dense f64 tensors with tape-based reverse-mode
//!   differentiation and explicit gradient stopping;
//! - [`data`]: MNIST/CIFAR-10 binary loaders, two-fold splits, batch streams;
//! - [`models`]: the MLP and convnet optimizees as pure loss builders;
//! - [`attacks`]: FGSM and PGD under an l-infinity budget;
//! - [`lstm`]: the coordinatewise two-layer LSTM update rule with shared
//!   weights and per-coordinate state;
//! - [`optim`]: hand-designed baselines (ADAM, SGD);
//! - [`meta`]: unrolled meta-training of the update rule and the frozen
//!   transfer/evaluation loops.

pub mod attacks;
pub mod check;
pub mod data;
pub mod error;
pub mod graph;
mod kernels;
pub mod lstm;
pub mod meta;
pub mod models;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{BnMode, Graph, NodeId, Op};
pub use tensor::Tensor;
