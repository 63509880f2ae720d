//! Floating-point scalar abstraction shared by every numerical routine.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the quantizer is generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self;

    fn from_int(v: i64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Round to the nearest integer, ties to even.
    fn round_half_even(self) -> Self {
        let floor = self.floor();
        let diff = self - floor;
        let half = Self::lit(0.5);
        if diff > half {
            floor + Self::one()
        } else if diff < half {
            floor
        } else {
            let two = Self::lit(2.0);
            if (floor / two).floor() * two == floor {
                floor
            } else {
                floor + Self::one()
            }
        }
    }
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn from_int(v: i64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn from_int(v: i64) -> Self {
        v as f64
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
