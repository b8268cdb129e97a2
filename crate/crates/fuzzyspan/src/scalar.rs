//! Generic scalar abstraction so the math core runs in either precision.
//!
//! Everything numeric in this crate is written against [`Scalar`]; the CLI
//! and the test suites instantiate it at `f64`, which the concrete aliases
//! at the crate root reflect.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::ScalarOperand;
use num_traits::Float;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point element type for all model math.
pub trait Scalar:
    Float
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($($t:ty),*) => {$(
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    )*};
}

impl_scalar!(f32, f64);

/// Shorthand used all over the math code: `sc::<S>(0.5)`.
#[inline]
pub fn sc<S: Scalar>(v: f64) -> S {
    S::from_f64(v)
}

/// Zero constructor usable as a serde default path.
#[inline]
pub fn zero<S: Scalar>() -> S {
    S::zero()
}
