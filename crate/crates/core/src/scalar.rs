//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point type the geometry, quantizer and objective code is generic over.
///
/// Implemented for `f32` and `f64`. Production paths use `f64`; hyperbolic
/// functions amplify rounding and the tolerances below reflect that.
pub trait Scalar:
    Float
    + FloatConst
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
    /// Relative tolerance used when validating the hyperboloid constraint.
    fn manifold_tol() -> Self;

    /// Tolerance on `<v, p>_L` for accepting `v` as tangent at `p`.
    fn tangent_tol() -> Self;

    /// Lossless for f64, rounding for f32.
    fn from_f32(x: f32) -> Self;
}

impl Scalar for f64 {
    fn manifold_tol() -> Self {
        1e-9
    }

    fn tangent_tol() -> Self {
        1e-6
    }

    fn from_f32(x: f32) -> Self {
        x as f64
    }
}

impl Scalar for f32 {
    fn manifold_tol() -> Self {
        2e-5
    }

    fn tangent_tol() -> Self {
        1e-3
    }

    fn from_f32(x: f32) -> Self {
        x
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

#[inline]
pub(crate) fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
