//! Conditional normalizing flows for structured prediction.
//!
//! A flow maps an output `y` to Gaussian latents through invertible layers
//! whose weights are produced by networks that read the input `x`. The
//! exact conditional log-likelihood `log p(y|x)` is available in closed form.

// `!(a > b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod flow;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod tasks;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
