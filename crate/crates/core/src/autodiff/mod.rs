//! Reverse-mode differentiation over dense tensors, plus Adam and dropout.

mod adam;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use tape::{dropout, Gradients, Tape, Tensor, Var};

use crate::linalg::LinalgError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("loss must be a 1x1 tensor, got {shape:?}")]
    NonScalarLoss { shape: (usize, usize) },
    #[error("parameter {index}: shape {param:?} does not match gradient or optimizer state {grad:?}")]
    ShapeMismatch {
        index: usize,
        param: (usize, usize),
        grad: (usize, usize),
    },
    #[error("optimizer tracks {expected} tensors, got {params} parameters and {grads} gradients")]
    ParamCountMismatch {
        expected: usize,
        params: usize,
        grads: usize,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}
