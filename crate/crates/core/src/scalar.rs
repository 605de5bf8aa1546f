//! Scalar abstraction: all numeric code is generic over `f32`/`f64`.
//!
//! Training normally runs in `f32`; gradient checking and the determinism
//! harness run in `f64`, where finite differences have enough headroom.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

pub trait Scalar: Float + NumAssign + Sum + Debug + Display + Default + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Widening from `f32` is exact for both supported scalars.
    fn from_f32(v: f32) -> Self;
    /// Narrowing; lossy for `f64` values outside `f32` precision.
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline(always)]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline(always)]
    fn as_f32(self) -> f32 {
        self as f32
    }
}
