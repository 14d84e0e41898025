//! Dense `f64` tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport, MAX_EPS};
pub use graph::{Gradients, Graph, Var, NORM_GUARD};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("finite-difference step {eps} outside (0, 1e-2]")]
    InvalidEpsilon { eps: f64 },
}
