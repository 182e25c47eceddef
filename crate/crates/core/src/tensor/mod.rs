//! Dense row-major tensors and the reverse-mode differentiation tape.

mod dense;
mod gradcheck;
pub(crate) mod kernels;
mod tape;

#[cfg(test)]
mod tests;

pub use dense::Tensor;
pub use gradcheck::gradient_check;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of bounds for {bound} rows")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward was already run on this tape; record a fresh tape instead")]
    BackwardAlreadyRun,
    #[error("variable belongs to a different tape or was never recorded")]
    UnknownVariable,
}

pub type TensorResult<T> = Result<T, TensorError>;
