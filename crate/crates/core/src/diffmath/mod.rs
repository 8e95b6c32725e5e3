//! Reverse-mode differentiation over small dense `f64` arrays.
//!
//! Every forward pass records onto a fresh [`Tape`]; parameters enter as
//! [`Tape::param`] leaves and come back out through [`Tape::grad`] after
//! [`Tape::backward`]. [`Tape::stop_gradient`] produces a parentless constant
//! with the same value, so nothing upstream of it receives gradient.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradCheck, REL_ERR_FLOOR};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{dot, norm};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankError {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid shape {shape:?} (at most 3 positive dimensions)")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: argument {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("vector norm below 1e-12")]
    ZeroNorm,
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}
