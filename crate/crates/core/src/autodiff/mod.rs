//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they run. [`Tape::backward`]
//! then sweeps the tape once in reverse. Fused operations (sparse attention,
//! expert mixing) are recorded with [`Tape::record`] and a hand-written
//! backward rule.

pub mod linalg;
mod ops;
mod tape;

pub use ops::{concat_rows, gelu, gelu_grad, sigmoid, BinaryOp, UnaryOp, LAYER_NORM_EPS};
pub use tape::{BackwardFn, GradSink, Gradients, NodeId, Tape, Var};
