//! Dense tensors, reverse-mode differentiation and a finite-difference
//! gradient oracle.

pub mod functional;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use functional::{cosine_similarity, softmax_tempered, COSINE_EPS};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use tape::{Gradients, LinearOperator, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: String, index: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is not connected to any gradient-carrying leaf")]
    Disconnected,
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
