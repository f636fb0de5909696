//! Bracketing root finder for monotone increasing scalar functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BisectionConfig {
    pub lo: f64,
    pub hi: f64,
    /// Width of the final bracket.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of bracket doublings tried on each side.
    pub max_expansions: usize,
}

impl Default for BisectionConfig {
    fn default() -> Self {
        Self {
            lo: -10.0,
            hi: 10.0,
            tol: 1e-10,
            max_iter: 200,
            max_expansions: 8,
        }
    }
}

/// Root of an increasing `f`. The bracket `[lo, hi]` is pushed outwards
/// geometrically (each end doubles its distance from the midpoint) until the
/// sign changes; bisection then runs until the bracket is narrower than
/// `tol`. Returns the endpoint with the smaller `|f|`.
pub fn bisect_increasing<T, F>(f: F, cfg: &BisectionConfig) -> Result<T>
where
    T: Scalar,
    F: Fn(T) -> T,
{
    if !(cfg.lo < cfg.hi) || !(cfg.tol > 0.0) {
        return Err(Error::InvalidConfig("bisection needs lo < hi and tol > 0".into()));
    }
    let mid = T::lit(0.5 * (cfg.lo + cfg.hi));
    let mut lo = T::lit(cfg.lo);
    let mut hi = T::lit(cfg.hi);
    let mut flo = f(lo);
    let mut fhi = f(hi);
    let mut expansions = 0;
    while !(flo <= T::zero() && fhi >= T::zero()) {
        if flo.is_nan() || fhi.is_nan() || expansions >= cfg.max_expansions {
            return Err(Error::RootNotBracketed(format!(
                "f({lo}) = {flo:e}, f({hi}) = {fhi:e} after {expansions} expansions"
            )));
        }
        if flo > T::zero() {
            hi = lo;
            fhi = flo;
            lo = mid - (mid - lo) * T::lit(2.0);
            flo = f(lo);
        } else {
            lo = hi;
            flo = fhi;
            hi = mid + (hi - mid) * T::lit(2.0);
            fhi = f(hi);
        }
        expansions += 1;
    }
    let tol = T::lit(cfg.tol);
    for _ in 0..cfg.max_iter {
        if hi - lo <= tol || flo == T::zero() || fhi == T::zero() {
            break;
        }
        let m = lo + (hi - lo) * T::lit(0.5);
        if m <= lo || m >= hi {
            break;
        }
        let fm = f(m);
        if fm.is_nan() {
            return Err(Error::RootNotBracketed(format!("f({m}) is NaN")));
        }
        if fm <= T::zero() {
            lo = m;
            flo = fm;
        } else {
            hi = m;
            fhi = fm;
        }
    }
    Ok(if flo.abs() <= fhi.abs() { lo } else { hi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::logistic;

    #[test]
    fn finds_root_inside_initial_bracket() {
        let x: f64 = bisect_increasing(|x: f64| x * x * x - 2.0, &BisectionConfig::default()).unwrap();
        assert!((x - 2.0_f64.cbrt()).abs() < 1e-10);
    }

    #[test]
    fn expands_bracket_geometrically() {
        let x: f64 = bisect_increasing(|x: f64| x - 55.0, &BisectionConfig::default()).unwrap();
        assert!((x - 55.0).abs() < 1e-10);
        let x: f64 = bisect_increasing(|x: f64| x + 300.0, &BisectionConfig::default()).unwrap();
        assert!((x + 300.0).abs() < 1e-10);
    }

    #[test]
    fn unreachable_level_is_not_bracketed() {
        // logistic never reaches 1.5
        let err = bisect_increasing(|x: f64| logistic(x) - 1.5, &BisectionConfig::default());
        assert!(matches!(err, Err(Error::RootNotBracketed(_))));
        let err = bisect_increasing(|_: f64| f64::NAN, &BisectionConfig::default());
        assert!(matches!(err, Err(Error::RootNotBracketed(_))));
    }

    #[test]
    fn inverts_logistic_level() {
        let y = 0.3_f64;
        let x = bisect_increasing(|x: f64| logistic(x) - y, &BisectionConfig::default()).unwrap();
        assert!((logistic(x) - y).abs() < 1e-10);
        assert!((x - (y / (1.0 - y)).ln()).abs() < 1e-9);
    }
}
