//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! Every op executed through a [`Var`] is appended to its [`Tape`] together
//! with whatever it needs for its vector-Jacobian product. [`Tape::backward`]
//! walks the tape once in reverse and returns a [`Gradients`] table.

mod kernels;
mod ops;
mod params;
mod rng;
mod tape;
mod tensor;

pub use ops::PadMode;
pub use params::{ParamId, ParamStore};
pub use rng::{derive_seed, RngState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
}

pub type Result<T> = std::result::Result<T, TensorError>;
