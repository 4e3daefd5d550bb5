//! NCHW tensors with a dynamic reverse-mode tape.

mod kernels;
mod ops;
mod tape;
mod value;

pub use kernels::ConvGeom;
pub use ops::Conv2dOpts;
pub use tape::{Grads, Tape, Var};
pub use value::Tensor;

#[cfg(test)]
mod tests;
