//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor).
//!
//! Every primitive executed through a [`Var`] is appended to its [`Tape`];
//! [`Tape::backward`] replays the record in reverse creation order, which
//! is a topological order because a node can only reference earlier nodes.

mod broadcast;
mod conv;
mod elementwise;
pub mod gradcheck;
mod linalg;
mod loss;
mod norm;
mod shape;
mod sinc;
pub mod suite;
mod tape;

use thiserror::Error;

pub use conv::{Conv1dGeometry, Conv2dGeometry, Pool2dGeometry};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use norm::NormStats;
pub use sinc::{realized_band, SincSpec};
pub use tape::{Gradients, Tape, Var};

/// Failures raised by tensor construction and by the differentiable
/// primitives.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} values, got {len}", crate::tensor::numel(shape))]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero extent")]
    EmptyExtent(Vec<usize>),
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
