//! Scalar abstraction shared by every numerical routine in the crate.
//!
//! All kernels are written against [`Real`], which is implemented for `f32`
//! and `f64`. Random numbers are generated in `f64` and narrowed on use.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Converts an `f64` literal; exact for `f64`, rounded for `f32`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    /// Smallest positive normal value.
    fn tiny() -> Self;

    /// `(1 - exp(-a t)) / a`, continuous at `a = 0`.
    #[inline]
    fn decay_integral(a: Self, t: Self) -> Self {
        if a == Self::zero() {
            t
        } else {
            -(-(a * t)).exp_m1() / a
        }
    }
}

impl Real for f32 {
    #[inline]
    fn tiny() -> Self {
        f32::MIN_POSITIVE
    }
}

impl Real for f64 {
    #[inline]
    fn tiny() -> Self {
        f64::MIN_POSITIVE
    }
}
