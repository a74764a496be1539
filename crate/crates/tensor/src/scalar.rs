use num_traits::{Float, FromPrimitive};

/// Floating-point scalar a tensor may hold.
///
/// Implemented for `f32` and `f64`. Gradient-oracle tolerances in the test
/// suites assume `f64`; `f32` is provided for callers that trade precision
/// for memory.
pub trait Scalar:
    Float + FromPrimitive + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}
