//! Recurrent sparse structured transformer.
//!
//! A single weight-tied block is applied `K` times. Each iteration attends
//! sparsely (top-k keys, sparsemax/entmax weights, top-e expert routing),
//! reads a two-level memory (token cache plus gated segment slots), and
//! biases attention with a content-only token graph instead of positional
//! encodings.

pub mod ablation;
pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod sparse;
pub mod structure;
pub mod tensor;
pub mod training;

pub use error::{Error, Result, TensorError};
pub use tensor::Tensor;
