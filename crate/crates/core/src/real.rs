//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

/// Floating point scalar used throughout the crate: `f32` or `f64`.
///
/// Probability math in the decoding pipeline is normally instantiated with
/// `f64`; `f32` exists for storage-width experiments and for traces recorded
/// at single precision.
pub trait Real:
    Float + FloatConst + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar (rounding for `f32`).
    fn of(x: f64) -> Self;

    /// Widens (or passes through) to `f64`.
    fn as_f64(self) -> f64;

    /// Bytes per value when written to a trace.
    const WIDTH: u32;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    const WIDTH: u32 = 4;
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    const WIDTH: u32 = 8;
}
