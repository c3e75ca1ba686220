//! Dense tensors with dynamic, per-step reverse-mode differentiation.
//!
//! Storage is row-major with batch axes leftmost. The engine is generic over
//! [`Real`] so the same code runs in `f32` for training and `f64` for
//! finite-difference checks.

mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use gradcheck::{compare_gradients, grad_check, GradCheckReport};
pub use graph::{Graph, Var, LOG_CLAMP};
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
}
