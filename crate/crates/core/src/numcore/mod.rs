//! Dense `f64` tensors, a reverse-mode tape, Adam, and a finite-difference oracle.
//!
//! Tensors are row-major. Matrix ops work on rank-2 values `[rows, cols]`;
//! rank-1 values serve as biases broadcast over rows via [`Tape::add_row`].

mod adam;
mod finite_diff;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use finite_diff::{finite_diff_grad, max_relative_error};
pub use tape::{with_injected_fault, Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("objective is non-finite when perturbing coordinate {index}")]
    NonFiniteObjective { index: usize },
    #[error("no gradient supplied for parameter {0}")]
    MissingGradient(String),
}
