//! Floating-point scalar abstraction.
//!
//! All numeric code is generic over [`Scalar`] so the same kernels run in
//! f32 for training/inference and in f64 for gradient audits.

use num_traits::{Float, NumAssign, NumCast};

/// f32 or f64.
pub trait Scalar:
    Float + NumAssign + std::fmt::Debug + std::fmt::Display + Default + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to scalar")
    }

    fn from_usize(v: usize) -> Self {
        <Self as NumCast>::from(v).expect("usize converts to scalar")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
