//! Dense tensors, a differentiation tape, Huber loss and Adam.

mod adam;
mod gradcheck;
mod lstm;
mod real;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use lstm::lstm_final;
pub use gradcheck::{grad_check, grad_check_tape, relative_error, GradCheckOptions, GradCheckReport, WorstCoordinate};
pub use real::Real;
pub use tape::{huber, huber_grad, Gradients, Tape, Var};
pub use tensor::{ParamGrads, ParamId, ParamStore, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("empty input")]
    EmptyInput,
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}
