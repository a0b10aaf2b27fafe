//! Minimal dense reverse-mode automatic differentiation.
//!
//! Values are recorded on a [`Tape`] as they are computed; [`Tape::backward`]
//! sweeps the record in reverse and returns gradients for every leaf that
//! influenced the loss. Everything is 64-bit.

mod check;
mod gemm;
mod ops;
mod tape;
mod tensor;

pub use check::grad_check;
pub use ops::sigmoid;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },
    #[error("attention: query row {row} has every key masked")]
    AllMasked { row: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
