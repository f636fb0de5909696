//! Demand inversion `δ = σ⁻¹(y, p, x2)`.
//!
//! Plain logit inverts in closed form. Mixed logit runs the contraction
//! `δ ← δ + log y − log σ(δ)` from the plain-logit starting point and switches
//! to Newton on `F(δ) = log σ(δ) − log y` once the log residual drops below
//! `newton_switch`. A Newton step is accepted only if it lowers the residual
//! (after up to 30 halvings); otherwise a contraction step is taken, so the
//! residual sequence never increases.

use serde::{Deserialize, Serialize};

use crate::demand::{ShareMap, ShareMapKind};
use crate::error::{Error, Result};
use crate::linalg::solve_in_place;
use crate::scalar::Scalar;
use crate::types::{Bundle, SharesVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    /// Sup-norm tolerance on `log y − log σ(δ)`. Implies the same bound on
    /// the share residual since shares are below one.
    pub tol: f64,
    pub max_iter: usize,
    pub newton_polish: bool,
    pub newton_switch: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 10_000,
            newton_polish: true,
            newton_switch: 1e-4,
        }
    }
}

impl InversionConfig {
    /// Default settings with the tolerance floored at `100 ε` of `T`.
    pub fn for_precision<T: Scalar>() -> Self {
        let floor = 100.0 * T::epsilon().as_f64();
        Self {
            tol: Self::default().tol.max(floor),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidConfig("inversion tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("inversion max_iter must be >= 1".into()));
        }
        if !(self.newton_switch > 0.0) {
            return Err(Error::InvalidConfig(
                "newton_switch must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Result of an inversion together with its residual history.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionTrace<T> {
    pub delta: Vec<T>,
    /// `‖log y − log σ(δ_t)‖∞` for `t = 0, 1, …`, last entry at the returned δ.
    pub residuals: Vec<f64>,
    pub newton_steps: usize,
}

/// Plain-logit index implied by `y`, net of the non-random index.
fn logit_start<T: Scalar>(map: &ShareMap<T>, y: &SharesVector<T>, a: &Bundle<T>) -> Vec<T> {
    y.log_ratios()
        .into_iter()
        .enumerate()
        .map(|(j, r)| r - map.base_index(a, j))
        .collect()
}

fn log_residual<T: Scalar>(log_y: &[T], sigma: &[T], out: &mut [T]) -> Option<f64> {
    let mut worst = 0.0_f64;
    for ((o, &ly), &s) in out.iter_mut().zip(log_y).zip(sigma) {
        if !(s > T::zero()) {
            return None;
        }
        *o = ly - s.ln();
        let r = o.abs().as_f64();
        if !r.is_finite() {
            return None;
        }
        worst = worst.max(r);
    }
    Some(worst)
}

/// `δ` with `σ(δ, a) = y`.
pub fn invert<T: Scalar>(
    map: &ShareMap<T>,
    y: &SharesVector<T>,
    a: &Bundle<T>,
    cfg: &InversionConfig,
) -> Result<Vec<T>> {
    invert_with_trace(map, y, a, cfg).map(|t| t.delta)
}

pub fn invert_with_trace<T: Scalar>(
    map: &ShareMap<T>,
    y: &SharesVector<T>,
    a: &Bundle<T>,
    cfg: &InversionConfig,
) -> Result<InversionTrace<T>> {
    cfg.validate()?;
    let j = a.j();
    if y.len() != j {
        return Err(Error::dim("observed shares", j, y.len()));
    }
    a.check_len(j)?;
    let mut delta = logit_start(map, y, a);
    if map.kind() == ShareMapKind::PlainLogit {
        return Ok(InversionTrace {
            delta,
            residuals: Vec::new(),
            newton_steps: 0,
        });
    }

    let log_y: Vec<T> = y.as_slice().iter().map(|v| v.ln()).collect();
    let mut r = vec![T::zero(); j];
    let mut r_trial = vec![T::zero(); j];
    let sigma = map.raw_shares(&delta, a)?;
    let mut res = log_residual(&log_y, &sigma, &mut r).ok_or_else(|| {
        Error::IntegrationFailure("shares underflow at the logit starting point".into())
    })?;
    let mut residuals = vec![res];
    let mut newton_steps = 0;
    // shares and Jacobian at the current delta, when already computed
    let mut cached: Option<(Vec<T>, Vec<T>)> = None;

    for _ in 0..cfg.max_iter {
        if res <= cfg.tol {
            return Ok(InversionTrace {
                delta,
                residuals,
                newton_steps,
            });
        }
        let mut accepted = false;
        if cfg.newton_polish && res < cfg.newton_switch {
            let (s, jac) = match cached.take() {
                Some(c) => c,
                None => map.shares_and_jacobian(&delta, a)?,
            };
            // J_F = diag(1/σ) ∂σ/∂δ, step solves J_F Δ = log y − log σ
            let mut jf = jac;
            for row in 0..j {
                for col in 0..j {
                    jf[row * j + col] = jf[row * j + col] / s[row];
                }
            }
            let mut step = r.clone();
            if solve_in_place(&mut jf, &mut step, j).is_ok() {
                let mut scale = T::one();
                for _ in 0..30 {
                    let trial: Vec<T> = delta
                        .iter()
                        .zip(&step)
                        .map(|(d, s)| *d + scale * *s)
                        .collect();
                    if let Ok((st, jt)) = map.shares_and_jacobian(&trial, a) {
                        if let Some(rt) = log_residual(&log_y, &st, &mut r_trial) {
                            if rt < res {
                                delta = trial;
                                res = rt;
                                std::mem::swap(&mut r, &mut r_trial);
                                cached = Some((st, jt));
                                accepted = true;
                                newton_steps += 1;
                                break;
                            }
                        }
                    }
                    scale = scale * T::lit(0.5);
                }
            }
        }
        if !accepted {
            let trial: Vec<T> = delta.iter().zip(&r).map(|(d, s)| *d + *s).collect();
            let st = map.raw_shares(&trial, a)?;
            let rt = log_residual(&log_y, &st, &mut r_trial).ok_or_else(|| {
                Error::IntegrationFailure("shares underflow during contraction".into())
            })?;
            if rt >= res && res < cfg.newton_switch {
                // floating-point floor reached above tol
                break;
            }
            delta = trial;
            res = rt;
            std::mem::swap(&mut r, &mut r_trial);
        }
        residuals.push(res);
    }
    if res <= cfg.tol {
        return Ok(InversionTrace {
            delta,
            residuals,
            newton_steps,
        });
    }
    Err(Error::NoConvergence {
        iterations: residuals.len() - 1,
        residual: res,
    })
}

/// `ξ = σ⁻¹(y, p, x2) − x1`.
pub fn structural_shock<T: Scalar>(
    map: &ShareMap<T>,
    y: &SharesVector<T>,
    a: &Bundle<T>,
    cfg: &InversionConfig,
) -> Result<Vec<T>> {
    let mut delta = invert(map, y, a, cfg)?;
    for (d, x) in delta.iter_mut().zip(&a.x1) {
        *d = *d - *x;
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{Characteristic, Integration};
    use crate::scalar::max_abs_diff;
    use crate::types::MixingSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lognormal_map() -> ShareMap<f64> {
        ShareMap::mixed_logit(
            0.0,
            vec![],
            MixingSpec::lognormal_1d(0.0, 0.5),
            vec![Characteristic::NegPrice],
            Integration::GaussHermite { nodes: 32 },
        )
        .unwrap()
    }

    fn prices(rng: &mut ChaCha8Rng, j: usize) -> Bundle<f64> {
        Bundle::from_prices((0..j).map(|_| rng.random_range(0.5..3.0)).collect())
    }

    #[test]
    fn plain_logit_closed_form() {
        let map = ShareMap::plain_logit(1.2, vec![]);
        let a = Bundle::from_prices(vec![1.0, 2.0]);
        let y = SharesVector::new(vec![0.2, 0.3]).unwrap();
        let d = invert(&map, &y, &a, &InversionConfig::default()).unwrap();
        assert!((d[0] - ((0.2_f64 / 0.5).ln() + 1.2)).abs() < 1e-15);
        assert!((d[1] - ((0.3_f64 / 0.5).ln() + 2.4)).abs() < 1e-15);
        let back = map.shares(&d, &a).unwrap();
        assert!(max_abs_diff(back.as_slice(), y.as_slice()) <= 1e-14);
    }

    #[test]
    fn mixed_logit_round_trip_across_sizes() {
        let map = lognormal_map();
        let cfg = InversionConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for j in [1usize, 5, 25] {
            for _ in 0..20 {
                let a = prices(&mut rng, j);
                let truth: Vec<f64> = (0..j).map(|_| rng.random_range(-5.0..5.0)).collect();
                let y = map.shares(&truth, &a).unwrap();
                let d = invert(&map, &y, &a, &cfg).unwrap();
                assert!(max_abs_diff(&d, &truth) <= 1e-10, "J={j}");
            }
        }
    }

    #[test]
    fn degenerate_mixing_agrees_with_closed_form() {
        let mixed = ShareMap::mixed_logit(
            0.0,
            vec![],
            MixingSpec::degenerate(vec![0.9]),
            vec![Characteristic::NegPrice],
            Integration::default(),
        )
        .unwrap();
        let plain = ShareMap::plain_logit(0.9, vec![]);
        let a = Bundle::from_prices(vec![1.0, 1.5, 2.0]);
        let y = SharesVector::new(vec![0.1, 0.25, 0.3]).unwrap();
        let cfg = InversionConfig::default();
        let dm = invert(&mixed, &y, &a, &cfg).unwrap();
        let dp = invert(&plain, &y, &a, &cfg).unwrap();
        assert!(max_abs_diff(&dm, &dp) <= 1e-10);
    }

    #[test]
    fn structural_shock_subtracts_x1() {
        let map = lognormal_map();
        let cfg = InversionConfig::default();
        let xi = vec![0.4, -1.1];
        let x1 = vec![0.7, 0.2];
        let a = Bundle::new(x1.clone(), vec![1.0, 2.0], vec![]).unwrap();
        let delta: Vec<f64> = x1.iter().zip(&xi).map(|(x, e)| x + e).collect();
        let y = map.shares(&delta, &a).unwrap();
        let got = structural_shock(&map, &y, &a, &cfg).unwrap();
        assert!(max_abs_diff(&got, &xi) <= 1e-10);

        let a0 = a.with_x1(vec![0.0, 0.0]);
        assert_eq!(
            structural_shock(&map, &y, &a0, &cfg).unwrap(),
            invert(&map, &y, &a0, &cfg).unwrap()
        );
    }

    #[test]
    fn tight_iteration_budget_reports_no_convergence() {
        let map = ShareMap::mixed_logit(
            0.0,
            vec![],
            MixingSpec::lognormal_1d(-0.5, 2.0),
            vec![Characteristic::NegPrice],
            Integration::GaussHermite { nodes: 32 },
        )
        .unwrap();
        let a = Bundle::from_prices(vec![2.0]);
        let y = map.shares(&[3.0], &a).unwrap();
        let cfg = InversionConfig {
            max_iter: 1,
            newton_polish: false,
            ..InversionConfig::default()
        };
        match invert(&map, &y, &a, &cfg) {
            Err(Error::NoConvergence { iterations, residual }) => {
                assert_eq!(iterations, 1);
                assert!(residual > 0.0);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn contraction_alone_converges_without_newton() {
        let map = lognormal_map();
        let a = Bundle::from_prices(vec![1.0, 2.0, 0.7]);
        let truth = [0.5, -0.3, 1.2];
        let y = map.shares(&truth, &a).unwrap();
        let cfg = InversionConfig {
            newton_polish: false,
            tol: 1e-11,
            ..InversionConfig::default()
        };
        let t = invert_with_trace(&map, &y, &a, &cfg).unwrap();
        assert_eq!(t.newton_steps, 0);
        assert!(max_abs_diff(&t.delta, &truth) < 1e-9);
    }

    #[test]
    fn single_precision_round_trip() {
        let map = ShareMap::<f32>::mixed_logit(
            0.0,
            vec![],
            MixingSpec::lognormal_1d(0.0, 0.5),
            vec![Characteristic::NegPrice],
            Integration::default(),
        )
        .unwrap();
        let a = Bundle::from_prices(vec![1.0_f32, 2.0]);
        let y = map.shares(&[0.3_f32, -0.2], &a).unwrap();
        let cfg = InversionConfig::for_precision::<f32>();
        let d = invert(&map, &y, &a, &cfg).unwrap();
        assert!((d[0] - 0.3).abs() < 1e-4 && (d[1] + 0.2).abs() < 1e-4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn round_trips_both_ways(
                delta in proptest::collection::vec(-4.0..4.0_f64, 1..6),
                p in 0.5..3.0_f64,
            ) {
                let map = lognormal_map();
                let cfg = InversionConfig::default();
                let j = delta.len();
                let a = Bundle::from_prices(vec![p; j]);
                let y = map.shares(&delta, &a).unwrap();
                let d = invert(&map, &y, &a, &cfg).unwrap();
                prop_assert!(max_abs_diff(&d, &delta) <= 1e-10);
                let back = map.shares(&d, &a).unwrap();
                prop_assert!(max_abs_diff(back.as_slice(), y.as_slice()) <= 10.0 * cfg.tol);
            }

            #[test]
            fn residuals_never_increase(
                delta in proptest::collection::vec(-4.0..4.0_f64, 1..5),
                p in 0.5..3.0_f64,
                newton in any::<bool>(),
            ) {
                let map = ShareMap::mixed_logit(
                    0.0,
                    vec![],
                    MixingSpec::lognormal_1d(-0.5, 2.0),
                    vec![Characteristic::NegPrice],
                    Integration::GaussHermite { nodes: 32 },
                )
                .unwrap();
                let j = delta.len();
                let a = Bundle::from_prices(vec![p; j]);
                let y = map.shares(&delta, &a).unwrap();
                let cfg = InversionConfig { newton_polish: newton, tol: 1e-11, ..InversionConfig::default() };
                let t = invert_with_trace(&map, &y, &a, &cfg).unwrap();
                prop_assert!(t.residuals.windows(2).all(|w| w[1] <= w[0]));
            }

            #[test]
            fn shock_invariant_to_common_shift(
                xi in proptest::collection::vec(-3.0..3.0_f64, 2),
                c in -2.0..2.0_f64,
            ) {
                let map = lognormal_map();
                let cfg = InversionConfig::default();
                let a = Bundle::new(vec![0.1, -0.4], vec![1.0, 2.0], vec![]).unwrap();
                let shifted = a.with_x1(a.x1.iter().map(|x| x + c).collect());
                let delta: Vec<f64> = a.x1.iter().zip(&xi).map(|(x, e)| x + e).collect();
                let delta_s: Vec<f64> = delta.iter().map(|d| d + c).collect();
                let e1 = structural_shock(&map, &map.shares(&delta, &a).unwrap(), &a, &cfg).unwrap();
                let e2 = structural_shock(&map, &map.shares(&delta_s, &shifted).unwrap(), &shifted, &cfg).unwrap();
                prop_assert!(max_abs_diff(&e1, &e2) <= 1e-10);
            }
        }
    }
}
