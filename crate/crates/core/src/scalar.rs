//! Scalar abstraction: the pipeline runs in `f32`, verification suites in `f64`.

use std::fmt;

use num_traits::Float;

/// Element type of tensors. `f32` is the default working precision; `f64` is
/// the wide mode used by finite-difference oracles.
pub trait Scalar:
    Float + num_traits::NumAssignOps + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
