//! Element types for tensors.
//!
//! Training and inference run in `f32`; gradient-check tests switch the
//! whole stack to `f64` by instantiating the same generic code with the
//! wider type. Reductions accumulate in `f64` regardless of the element
//! type (see `Graph`).

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// A real scalar the tensor engine can compute with.
pub trait Scalar:
    Copy
    + Clone
    + Debug
    + Display
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Numerically stable softmax of a slice, written into `out`.
///
/// Subtracts the running maximum before exponentiating and accumulates the
/// normalizer in `f64`.
pub fn softmax_slice<E: Scalar>(xs: &[E], out: &mut [E]) {
    debug_assert_eq!(xs.len(), out.len());
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        max = max.max(x.to_f64());
    }
    let mut denom = 0.0f64;
    for (o, &x) in out.iter_mut().zip(xs) {
        let e = (x.to_f64() - max).exp();
        *o = E::from_f64(e);
        denom += e;
    }
    for o in out.iter_mut() {
        *o = E::from_f64(o.to_f64() / denom);
    }
}

/// Stable `ln(sum(exp(xs)))` with `f64` accumulation.
pub fn logsumexp_slice<E: Scalar>(xs: &[E]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        max = max.max(x.to_f64());
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0f64;
    for &x in xs {
        sum += (x.to_f64() - max).exp();
    }
    max + sum.ln()
}

/// Stable `ln(1 + exp(x))`.
pub fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
