use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type shared by tensors, parameters and optimizer state.
///
/// Training runs in `f32`; `f64` exists so finite-difference gradient checks
/// have enough headroom.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Fractional bits of the fixed-point grid the rain decomposition lives on.
    ///
    /// Any two grid values below `2^(MANTISSA_DIGITS - GRID_BITS)` in
    /// magnitude add and subtract without rounding.
    const GRID_BITS: i32;

    /// Converts an `f64` literal. Panics only for values the type cannot hold.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal out of range")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar is representable as f64")
    }
}

impl Scalar for f32 {
    const GRID_BITS: i32 = 21;
}

impl Scalar for f64 {
    const GRID_BITS: i32 = 50;
}
