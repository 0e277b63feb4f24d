//! Dense tensors, a reverse-mode gradient tape and a finite-difference checker.
//!
//! Every trainable computation in the crate is written against [`Graph`].
//! Random draws enter the tape as constants, so sampled paths differentiate
//! with reparameterization semantics.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, grad_check_report, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, NumError>;

#[cfg(test)]
mod tests;
