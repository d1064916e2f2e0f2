//! Small reverse-mode autodiff engine over dense `f64` tensors.
//!
//! Built for the GAN models in `cgs-core`: besides ordinary backpropagation
//! it supports differentiating through a gradient (`grad(.., create_graph =
//! true)`), which the R1 penalty requires.

pub mod check;
mod error;
pub mod nn;
mod ops;
pub mod optim;
mod tensor;
mod var;

pub use error::{Result, ShapeError};
pub use ops::{sigmoid, softplus};
pub use tensor::{broadcast_shape, Tensor, GATHER_ZERO};
pub use var::{grad, grad_with_seed, is_grad_enabled, no_grad, GradModeGuard, Var};
