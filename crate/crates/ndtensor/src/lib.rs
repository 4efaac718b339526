//! Dense tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computations are
//! recorded on a [`Tape`] through [`Var`] handles; [`Tape::backward`]
//! returns the gradients of a scalar with respect to every leaf created
//! with `requires_grad`. Image tensors are NCHW and [`Var::conv2d`] is a
//! cross-correlation (the kernel is not flipped).
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root name the two concrete precisions.

mod error;
pub mod gradcheck;
pub mod kernels;
pub mod linalg;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use scalar::{DType, Scalar};
pub use tape::{CustomBackward, Gradients, Tape, Unary, Var};
pub use tensor::{broadcast_shapes, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
