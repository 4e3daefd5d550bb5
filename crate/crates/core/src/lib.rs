//! Two-stage image deraining: a sub-sampled rain estimator, a multi-input
//! attention module and a super-resolving background recovery network, built
//! on a small reverse-mode autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below pin the
//! two widths the crate is used with.

pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Grads, Tape, Tensor, Var};

/// Training precision.
pub type Tensor32 = Tensor<f32>;
/// Gradient-checking precision.
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
