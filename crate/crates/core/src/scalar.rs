use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{AsPrimitive, Float, FromPrimitive, NumAssign};

/// Floating point element type accepted by the scoring kernels.
///
/// Implemented for `f32` (the on-disk type) and `f64`. Kernels read elements
/// through [`AsPrimitive<f64>`] and accumulate in `f64` regardless of `S`.
pub trait Scalar:
    'static
    + Float
    + NumAssign
    + FromPrimitive
    + AsPrimitive<f64>
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
{
    fn from_f64_lossy(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}
