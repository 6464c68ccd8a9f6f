use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Real scalar used for weights and potential-theoretic quantities.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Default relative residual target for iterative solves.
    fn default_tol() -> f64;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f64 {
    fn default_tol() -> f64 {
        1e-10
    }
}

impl Scalar for f32 {
    fn default_tol() -> f64 {
        1e-5
    }
}
