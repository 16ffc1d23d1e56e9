//! Scalar abstraction shared by the bound machinery.
//!
//! Everything that only needs field arithmetic and elementary functions
//! (whitening, channel moments, the potential) is written against [`Real`],
//! so it can be run in `f32` for quick sweeps or `f64` for the reference
//! numbers. Simulation pipelines work in `f64` only.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the generic numerics.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    fn of_usize(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize representable")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("finite scalar")
    }

    /// Absolute tolerance appropriate for invariant checks at this precision.
    fn check_tol() -> Self;
}

impl Real for f64 {
    fn check_tol() -> Self {
        1e-10
    }
}

impl Real for f32 {
    fn check_tol() -> Self {
        1e-4
    }
}
