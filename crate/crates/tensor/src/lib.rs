//! Dense tensors with eager, tape-based reverse-mode differentiation.
//!
//! The operation set is the one a small convolutional vision model needs:
//! convolutions, pooling, resampling, dense layers, activations, softmax,
//! concatenation and a few fused losses. [`AdamW`] updates the tensors held
//! in a [`ParamStore`], and [`serialize`] reads and writes the `GZT1` record
//! format.

mod conv;
mod element;
mod error;
pub mod gradcheck;
mod ops;
mod optim;
mod params;
pub mod serialize;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use ops::sigmoid_scalar;
pub use optim::AdamW;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{fault, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
