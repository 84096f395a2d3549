//! Minimal reverse-mode automatic differentiation over dense `f64` matrices,
//! plus the Adam optimizer and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{SparseMatrix, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("tape already differentiated; record a new tape")]
    TapeConsumed,
    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(f64),
}
