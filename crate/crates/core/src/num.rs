//! Scalar abstraction: the whole crate computes over any real field that
//! nalgebra can factorize, which in practice means `f32` or `f64`.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use std::iter::Sum;

pub trait Scalar: RealField + FromPrimitive + ToPrimitive + Copy + Default + Sum {
    /// Lossy embedding of an `f64` constant.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant not representable in scalar type")
    }

    fn usize(v: usize) -> Self {
        Self::from_usize(v).expect("count not representable in scalar type")
    }

    fn nan() -> Self {
        Self::c(f64::NAN)
    }

    fn neg_inf() -> Self {
        Self::c(f64::NEG_INFINITY)
    }
}

impl<T> Scalar for T where T: RealField + FromPrimitive + ToPrimitive + Copy + Default + Sum {}
