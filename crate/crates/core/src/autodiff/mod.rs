//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every learnable weight lives in a [`ParamStore`]. A forward pass records
//! operations on a [`Tape`]; [`Tape::backward`] returns [`Gradients`] which can
//! be written into the store. Reductions run in a fixed sequential order, so
//! identical inputs give bit-identical values.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport, GRAD_CHECK_FLOOR};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Activation, Gradients, Tape, Var, LAYER_NORM_EPS, NORM_FLOOR};
pub use tensor::{Real, Tensor};

pub(crate) use tensor::dot;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("expected a matrix, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,
    #[error("parameter {0:?} registered twice")]
    DuplicateParam(String),
    #[error("{0}")]
    Invalid(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
