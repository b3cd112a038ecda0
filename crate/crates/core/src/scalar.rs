//! Floating-point scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate (rasters, tensors, homographies) is
//! generic over [`Scalar`], which is implemented for `f32` and `f64`.
//! Training pipelines run at `f32`; geometry estimation runs at `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    fn from64(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    /// Widening conversion to `f64`.
    fn to64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }

    /// Guard added to norm/denominator terms (1e-8).
    fn norm_eps() -> Self {
        Self::from64(1e-8)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
