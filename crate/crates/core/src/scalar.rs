//! Scalar abstraction for the numerical kernels.
//!
//! Share maps, inversion, quadrature and root finding are written against
//! [`Scalar`] so they run in `f32` or `f64`. Experiment-level code (diagnostics,
//! extrapolation, micro) is fixed to [`Real`].

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type usable by the generic kernels.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + LowerExp
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Every finite `f64` maps to some value of the
    /// supported types, so this never fails for them.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    /// Lossy widening to `f64`, used when handing values to the f64-only layers.
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// The concrete scalar used by experiment code and the CLI.
pub type Real = f64;

/// Sup norm of the difference of two equally sized slices.
pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x - *y).abs())
        .fold(T::zero(), |m, d| if d > m || d.is_nan() { d } else { m })
}

/// Numerically stable `log(1 + exp(x))`.
pub fn log1p_exp<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function `1 / (1 + exp(-t))`.
pub fn logistic<T: Scalar>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_is_symmetric_and_half_at_zero() {
        assert_eq!(logistic(0.0_f64), 0.5);
        for t in [-30.0, -2.5, 0.3, 7.0, 40.0] {
            let s = logistic(t) + logistic(-t);
            assert!((s - 1.0_f64).abs() < 1e-15);
        }
        assert!(logistic(-800.0_f64) >= 0.0);
        assert_eq!(logistic(800.0_f64), 1.0);
    }

    #[test]
    fn log1p_exp_matches_naive_in_safe_range() {
        for x in [-20.0_f64, -1.0, 0.0, 1.0, 20.0] {
            assert!((log1p_exp(x) - (1.0 + x.exp()).ln()).abs() < 1e-12);
        }
        assert!((log1p_exp(1000.0_f64) - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn max_abs_diff_propagates_nan() {
        assert!(max_abs_diff(&[1.0_f64, f64::NAN], &[1.0, 2.0]).is_nan());
        assert_eq!(max_abs_diff(&[1.0_f32, 3.0], &[0.5, 3.25]), 0.5);
    }
}
