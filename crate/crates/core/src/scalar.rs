//! Scalar abstraction shared by every numerical module.
//!
//! All math in the crate is written against [`Real`], which is satisfied by
//! `f32` and `f64`. Linear algebra goes through `nalgebra`, conversions
//! through `num-traits`.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// floating point: f32 or f64
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + std::fmt::Display + 'static
{
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts a slice of scalars between precisions.
pub fn cast_slice<A: Real, B: Real>(xs: &[A]) -> Vec<B> {
    xs.iter().map(|&x| B::lit(x.as_f64())).collect()
}
