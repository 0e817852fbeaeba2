//! Dense `f64` tensors and a small reverse-mode tape specialised for
//! volumetric convolutional networks.
//!
//! Activations are rank-5, laid out `[batch, channels, depth, height, width]`
//! with the last axis contiguous. Everything runs in double precision so that
//! central finite differences can be used to audit the backward passes.

mod conv;
mod gemm;
mod sum;
mod tape;
mod tensor;

pub use conv::ConvGeometry;
pub use sum::exact_sum;
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Mismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Geometry { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
