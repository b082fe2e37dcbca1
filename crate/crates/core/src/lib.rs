//! Compression toolkit for multi-input multi-output residual networks:
//! information-bottleneck channel pruning, batchnorm folding, cross-branch
//! neuron merging and post-training quantization, plus a small training
//! and evaluation harness.

pub mod autodiff;
pub mod error;
pub mod graph;
pub mod harness;
pub mod ops;
pub mod passes;
pub mod tensor;

pub use error::{MimoError, Result};
pub use graph::{build_preset, forward, ModelGraph, Preset};
pub use tensor::Tensor;
