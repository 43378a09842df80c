//! Dense tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{OpKind, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op} takes {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: {detail}")]
    BadAttribute { op: &'static str, detail: String },
    #[error("backward needs a single-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("gradient contains non-finite values")]
    NonFiniteGradient,
}
