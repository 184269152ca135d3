//! Deterministic CPU tensor engine with reverse-mode automatic
//! differentiation, covering the operation set of a hybrid CNN/attention
//! segmentation network.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded as
//! [`Var`] handles on a [`Tape`]. All kernels are generic over [`Scalar`] so
//! the same code runs in `f32` for training and `f64` for gradient checks.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{analytic_grad, finite_diff_gradcheck, gradcheck_at};
pub use ops::conv::{conv2d_reference, conv2d_tensor, ConvSpec};
pub use ops::elementwise::{broadcast_shape, Activation};
pub use ops::matmul::matmul_tensor;
pub use ops::norm::BatchStats;
pub use ops::pool::{PoolKind, ResizeMode};
pub use ops::softmax::softmax_tensor;
pub use scalar::{gemm, MatRef, Scalar};
pub use tape::{BackwardArgs, BackwardFn, Gradients, Tape, Var};
pub use tensor::{numel, strides, Tensor};
