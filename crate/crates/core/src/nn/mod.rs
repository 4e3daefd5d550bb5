//! Parameterized layers and the forward context that binds them to a tape.

mod conv;
mod params;
mod transformer;

#[cfg(test)]
mod tests;

pub use conv::{ChannelAttention, Conv2d, ConvUnit, DsConv, Rcab};
pub use params::{AttentionMap, Ctx, Init, Module, ParamSpec, ParamStore};
pub use transformer::{Embedding, FeedForward, LayerNorm2d, TransformerBlock, TransposedAttention};
pub(crate) use params::join;
