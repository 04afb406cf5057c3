//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Only the operations the model needs are provided. All arithmetic is
//! `f64`; a forward op that produces NaN or Inf is reported as an error
//! instead of being propagated.

mod adam;
mod tape;
mod tensor;


pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: column range {start}..{end} exceeds {cols} columns")]
    ColumnRange {
        op: &'static str,
        start: usize,
        end: usize,
        cols: usize,
    },
    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardTwice,
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}
