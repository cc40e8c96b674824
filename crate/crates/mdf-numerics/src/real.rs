use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar type the tensor engine is generic over. `f32` is the primary
/// precision; `f64` exists as a shadow mode for gradient checking.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + Debug + Display + Sum + Send + Sync + 'static
{
    fn from_f64_lossy(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Shorthand for converting literals into the active precision.
pub fn cast<T: Real>(x: f64) -> T {
    T::from_f64_lossy(x)
}
