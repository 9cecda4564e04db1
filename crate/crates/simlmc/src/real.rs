//! Scalar abstraction for the numerical core.
//!
//! Everything downstream (meshes, element matrices, KLE, statistics, the
//! MLMC engine) is generic over [`Real`] so the same code runs at `f32`
//! or `f64`. The shipped CLI and the stated tolerances assume `f64`; see
//! the aliases at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{FromPrimitive, ToPrimitive};

/// A real scalar usable throughout the crate.
///
/// `nalgebra::RealField` supplies the arithmetic and elementary functions,
/// `num_traits` the conversions from literals.
pub trait Real:
    nalgebra::RealField
    + FromPrimitive
    + ToPrimitive
    + Copy
    + Default
    + Display
    + Debug
    + Sum<Self>
    + for<'a> Sum<&'a Self>
{
    /// Shorthand for `from_f64(..).unwrap()`; every literal in the crate
    /// is exactly representable in `f32` and `f64`.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal out of range for scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }

    /// Machine epsilon of the concrete type (not of `f64`).
    fn machine_eps() -> Self;

    /// Smallest positive normal value, used as an underflow guard.
    fn tiny() -> Self;
}

impl Real for f32 {
    fn machine_eps() -> Self {
        f32::EPSILON
    }
    fn tiny() -> Self {
        f32::MIN_POSITIVE
    }
}

impl Real for f64 {
    fn machine_eps() -> Self {
        f64::EPSILON
    }
    fn tiny() -> Self {
        f64::MIN_POSITIVE
    }
}

/// Free-function form of [`Real::of`], handy in expressions.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::of(x)
}
