//! Scalar abstraction so the numerical core can run at f32 or f64.
//!
//! Tests and the acceptance experiments use f64; f32 is available for
//! faster exploratory runs via the aliases at the crate root.

use std::fmt::{Debug, Display};

/// Floating point scalar used throughout the numerical core.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("f64 -> scalar conversion")
    }
    fn to_f64_(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar -> f64 conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for writing literals inside generic code.
#[inline(always)]
pub fn c<T: Real>(v: f64) -> T {
    T::of(v)
}
