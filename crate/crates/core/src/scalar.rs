use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Floating-point element type of a [`Tensor`](crate::Tensor): `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Gauss error function.
    fn erf(self) -> Self;

    /// Lossy conversion used for reporting and tolerances.
    fn to_f64_lossy(self) -> f64;

    fn from_f64_lossy(x: f64) -> Self;
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn from_f64_lossy(x: f64) -> Self {
        x
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
}
