//! Scalar abstraction for the numeric core.

use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Floating-point scalar the tape and kernels are generic over.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;

    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }
}
