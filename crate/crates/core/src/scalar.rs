//! Scalar abstraction for the numerical core.
//!
//! Model evaluation, gradients, merging and the optimizer are written once
//! against [`Scalar`] and instantiated for `f64` (the default everywhere) and
//! `f32`. File formats and experiment bookkeeping stay in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal or config value.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    /// Widening conversion used for metrics and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts a length or count to a scalar.
pub(crate) fn count<S: Scalar>(n: usize) -> S {
    S::from_usize(n).expect("count is representable")
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// `ln σ(z) = -softplus(-z)`; finite wherever `σ(z)` itself underflows.
pub fn log_sigmoid<S: Scalar>(z: S) -> S {
    -softplus(-z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }

    #[test]
    fn sigmoid_deep_negative_stays_positive() {
        let s = sigmoid(-745.0f64);
        assert!(s > 0.0 && s.is_finite());
        let ls = log_sigmoid(-745.0f64);
        assert!(ls.is_finite());
        assert!((ls + 745.0).abs() < 1e-12);
        assert!(log_sigmoid(-1e6f64).is_finite());
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for &x in &[-20.0f64, -1.5, 0.0, 0.3, 7.0, 30.0] {
            let naive = (1.0 + x.exp()).ln();
            assert!((softplus(x) - naive).abs() < 1e-14 * naive.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn sigmoid_is_symmetric(z in -700.0f64..700.0) {
            prop_assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() <= 1e-15);
        }
    }
}
