//! Scalar abstraction shared by the geometry, clustering and metric code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal, panicking only for non-representable values.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    /// Relative tolerance used for on-boundary and degeneracy tests.
    fn geom_eps() -> Self;

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    #[inline]
    fn geom_eps() -> Self {
        1e-5
    }
}

impl Scalar for f64 {
    #[inline]
    fn geom_eps() -> Self {
        1e-10
    }
}
