//! Minimal dense tensor library with tape-based reverse-mode automatic
//! differentiation.
//!
//! Every forward operation records itself on a [`Tape`]; [`Tape::backward`]
//! replays the tape in reverse and produces gradients for exactly the nodes
//! that were created from tensors with `requires_grad == true`. Frozen
//! inputs never receive (or cost) a gradient.

mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{compare_gradients, finite_difference_grad, GradComparison};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Epsilon added to every L2-norm denominator.
pub const NORM_EPS: f32 = 1e-8;
/// Variance epsilon used by layer normalization.
pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: empty tensor")]
    Empty { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: index {index} out of range for size {size}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;
