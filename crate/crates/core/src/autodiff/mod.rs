//! Reverse-mode automatic differentiation over 4D `(n, c, h, w)` tensors,
//! limited to the operators a CycleGAN needs.

mod adam;
mod conv;
mod scalar;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use conv::PadMode;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward needs a [1, 1, 1, 1] loss, got {0:?}")]
    NonScalarLoss([usize; 4]),
    #[error("tensor data length {actual} does not match shape (expected {expected})")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("tensor contains a non-finite value")]
    NonFinite,
}
