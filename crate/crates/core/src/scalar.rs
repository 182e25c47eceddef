//! Scalar abstraction so the numeric core runs in either f32 or f64.
//!
//! All verification tests run in f64; f32 exists for faster training and is
//! selected through the run configuration.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point element type of tensors and model parameters.
pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from f64 (exact for f64, rounded for f32).
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts to any scalar")
    }

    /// Widening conversion to f64 (exact for both supported types).
    fn widen(self) -> f64;

    fn of_usize(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize fits in scalar range")
    }
}

impl Scalar for f64 {
    fn widen(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn widen(self) -> f64 {
        self as f64
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<S: Scalar>(x: S) -> S {
    // max(x, 0) + ln(1 + e^{-|x|})
    let zero = S::zero();
    let m = if x > zero { x } else { zero };
    m + (S::one() + (-x.abs()).exp()).ln()
}
