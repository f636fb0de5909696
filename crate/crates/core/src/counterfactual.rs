//! Unit-level counterfactuals.
//!
//! [`CounterfactualEngine`] predicts `Y(a')` from an observed `(Y, A)` through
//! the model-implied shock. [`HomTriple`] carries a transform `h(y, p, x2)`,
//! invertible in `y`, and a baseline bundle `a0`; it induces
//! `φ⁻¹(y) = h(y, p0, x20) − x10` and the conversion maps
//! `C_{a→a'}(y) = h⁻¹(h(y, p, x2) − x1 + x1', p', x2')`.

use serde::{Deserialize, Serialize};

use crate::demand::{ShareMap, ShareMapKind};
use crate::error::{Error, Result};
use crate::inversion::{invert, structural_shock, InversionConfig};
use crate::linalg;
use crate::population::PopulationSpec;
use crate::scalar::{max_abs_diff, Scalar};
use crate::types::{Bundle, MarketDraw, SharesVector};

/// Built-in transforms `h(y, p, x2)`, each invertible in `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "kind",
    rename_all = "kebab-case",
    bound(
        serialize = "T: Scalar + Serialize",
        deserialize = "T: Scalar + Deserialize<'de>"
    )
)]
pub enum HFamily<T: Scalar = f64> {
    /// Plain-logit inverse: `log y_j − log y_0 − (c − α p_j + x2_jᵀγ)`.
    LogitInverse {
        alpha: T,
        #[serde(default)]
        gamma: Vec<T>,
        #[serde(default)]
        intercept: T,
    },
    /// Inverse of a share map computed by the inversion module.
    MixedLogitInverse {
        map: ShareMap<T>,
        #[serde(default)]
        inversion: InversionConfig,
    },
    /// `h(y) = y`; its inverse fails outside the simplex.
    Identity,
    /// Elementwise strictly increasing piecewise-linear map through
    /// `(knots_y[k], knots_t[k])`, extended linearly beyond the end knots.
    MonotoneSpline { knots_y: Vec<T>, knots_t: Vec<T> },
    /// `M · inner(y) + offset` with `M` row-major `J × J` and invertible.
    Affine {
        inner: Box<HFamily<T>>,
        matrix: Vec<T>,
        offset: Vec<T>,
    },
}

fn spline_eval<T: Scalar>(xs: &[T], ys: &[T], v: T) -> T {
    let n = xs.len();
    let k = match xs.iter().position(|x| *x > v) {
        Some(0) => 0,
        Some(k) => k - 1,
        None => n - 2,
    };
    let w = (v - xs[k]) / (xs[k + 1] - xs[k]);
    ys[k] + w * (ys[k + 1] - ys[k])
}

impl<T: Scalar> HFamily<T> {
    pub fn logit_inverse(alpha: T) -> Self {
        HFamily::LogitInverse {
            alpha,
            gamma: Vec::new(),
            intercept: T::zero(),
        }
    }

    /// `h` of a share map: closed form for plain logit, numerical otherwise.
    pub fn from_share_map(map: &ShareMap<T>, inversion: InversionConfig) -> Self {
        match map.kind() {
            ShareMapKind::PlainLogit => HFamily::LogitInverse {
                alpha: map.config().alpha,
                gamma: map.config().gamma.clone(),
                intercept: map.config().intercept,
            },
            ShareMapKind::MixedLogit => HFamily::MixedLogitInverse {
                map: map.clone(),
                inversion,
            },
        }
    }

    /// `self + c`, a vertical shift.
    pub fn shifted(self, c: Vec<T>) -> Self {
        let j = c.len();
        let mut m = vec![T::zero(); j * j];
        for k in 0..j {
            m[k * j + k] = T::one();
        }
        HFamily::Affine {
            inner: Box::new(self),
            matrix: m,
            offset: c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            HFamily::MonotoneSpline { knots_y, knots_t } => {
                if knots_y.len() < 2 || knots_y.len() != knots_t.len() {
                    return Err(Error::InvalidConfig(
                        "spline needs at least two matching knots".into(),
                    ));
                }
                let inc = |v: &[T]| v.windows(2).all(|w| w[0] < w[1]);
                if !inc(knots_y) || !inc(knots_t) {
                    return Err(Error::InvalidConfig(
                        "spline knots must be strictly increasing".into(),
                    ));
                }
            }
            HFamily::Affine {
                inner,
                matrix,
                offset,
            } => {
                inner.validate()?;
                let j = offset.len();
                if matrix.len() != j * j {
                    return Err(Error::dim("affine matrix", j * j, matrix.len()));
                }
            }
            HFamily::MixedLogitInverse { inversion, .. } => inversion.validate()?,
            _ => {}
        }
        Ok(())
    }

    /// `h(y, p, x2)`; `a.x1` is ignored.
    pub fn eval(&self, y: &[T], a: &Bundle<T>) -> Result<Vec<T>> {
        match self {
            HFamily::LogitInverse {
                alpha,
                gamma,
                intercept,
            } => {
                let s = SharesVector::with_len(y.to_vec(), a.j())?;
                Ok(s.log_ratios()
                    .into_iter()
                    .enumerate()
                    .map(|(j, r)| {
                        let mut g = *intercept - *alpha * a.p[j];
                        for (x, c) in a.x2_row(j).iter().zip(gamma) {
                            g = g + *x * *c;
                        }
                        r - g
                    })
                    .collect())
            }
            HFamily::MixedLogitInverse { map, inversion } => {
                let s = SharesVector::with_len(y.to_vec(), a.j())?;
                invert(map, &s, a, inversion)
            }
            HFamily::Identity => Ok(y.to_vec()),
            HFamily::MonotoneSpline { knots_y, knots_t } => {
                Ok(y.iter().map(|v| spline_eval(knots_y, knots_t, *v)).collect())
            }
            HFamily::Affine {
                inner,
                matrix,
                offset,
            } => {
                let t = inner.eval(y, a)?;
                let j = offset.len();
                if t.len() != j {
                    return Err(Error::dim("affine input", j, t.len()));
                }
                Ok(linalg::mat_vec(matrix, &t, j)
                    .into_iter()
                    .zip(offset)
                    .map(|(v, c)| v + *c)
                    .collect())
            }
        }
    }

    /// `y` with `h(y, p, x2) = t`.
    pub fn inverse(&self, t: &[T], a: &Bundle<T>) -> Result<SharesVector<T>> {
        let outside = |e: Error| Error::InversionFailure(format!("h inverse leaves the simplex: {e}"));
        match self {
            HFamily::LogitInverse {
                alpha,
                gamma,
                intercept,
            } => {
                let map = ShareMap::plain_logit(*alpha, gamma.clone()).with_intercept(*intercept);
                map.shares(t, a).map_err(outside)
            }
            HFamily::MixedLogitInverse { map, .. } => map.shares(t, a).map_err(outside),
            HFamily::Identity => SharesVector::new(t.to_vec()).map_err(outside),
            HFamily::MonotoneSpline { knots_y, knots_t } => {
                let y = t.iter().map(|v| spline_eval(knots_t, knots_y, *v)).collect();
                SharesVector::new(y).map_err(outside)
            }
            HFamily::Affine {
                inner,
                matrix,
                offset,
            } => {
                let j = offset.len();
                if t.len() != j {
                    return Err(Error::dim("affine input", j, t.len()));
                }
                let rhs: Vec<T> = t.iter().zip(offset).map(|(v, c)| *v - *c).collect();
                let u = linalg::solve(matrix, &rhs, j)?;
                inner.inverse(&u, a)
            }
        }
    }
}

/// A transform `h` with baseline `a0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct HomTriple<T: Scalar = f64> {
    pub h: HFamily<T>,
    pub a0: Bundle<T>,
}

impl<T: Scalar> HomTriple<T> {
    pub fn new(h: HFamily<T>, a0: Bundle<T>) -> Result<Self> {
        h.validate()?;
        a0.validate()?;
        Ok(Self { h, a0 })
    }

    /// `H(y, p, x2) = h(y, p, x2)`.
    pub fn transformed(&self, y: &[T], a: &Bundle<T>) -> Result<Vec<T>> {
        self.h.eval(y, a)
    }

    /// `φ⁻¹(y) = h(y, p0, x20) − x10`, the latent shock implied by `Y(a0)`.
    pub fn phi_inverse(&self, y: &[T]) -> Result<Vec<T>> {
        let t = self.h.eval(y, &self.a0)?;
        Ok(t.into_iter().zip(&self.a0.x1).map(|(v, x)| v - *x).collect())
    }

    /// `φ(ξ) = h⁻¹(x10 + ξ, p0, x20)`.
    pub fn phi(&self, xi: &[T]) -> Result<SharesVector<T>> {
        let t: Vec<T> = xi.iter().zip(&self.a0.x1).map(|(e, x)| *e + *x).collect();
        self.h.inverse(&t, &self.a0)
    }

    /// `C_{a→a'}(y)`.
    pub fn convert(&self, y: &[T], a: &Bundle<T>, a_prime: &Bundle<T>) -> Result<SharesVector<T>> {
        a.check_len(y.len())?;
        a_prime.check_len(y.len())?;
        let t = self.h.eval(y, a)?;
        let t: Vec<T> = t
            .iter()
            .zip(a.x1.iter().zip(&a_prime.x1))
            .map(|(v, (x, xp))| *v - *x + *xp)
            .collect();
        self.h.inverse(&t, a_prime)
    }

    /// `C_0(y, a) = C_{a→a0}(y)`.
    pub fn to_baseline(&self, y: &[T], a: &Bundle<T>) -> Result<SharesVector<T>> {
        self.convert(y, a, &self.a0)
    }
}

/// The map `m(a, Y, A)` of a share-map model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct CounterfactualEngine<T: Scalar = f64> {
    pub map: ShareMap<T>,
    #[serde(default)]
    pub inversion: InversionConfig,
}

impl<T: Scalar> CounterfactualEngine<T> {
    pub fn new(map: ShareMap<T>, inversion: InversionConfig) -> Self {
        Self { map, inversion }
    }

    /// `σ(x1' + ξ̂, p', x2')` with `ξ̂` the model-implied shock of `(y, a)`.
    pub fn predict(
        &self,
        observed_y: &SharesVector<T>,
        observed_a: &Bundle<T>,
        target_a: &Bundle<T>,
    ) -> Result<SharesVector<T>> {
        target_a.check_len(observed_a.j())?;
        let xi = structural_shock(&self.map, observed_y, observed_a, &self.inversion)?;
        let delta: Vec<T> = xi.iter().zip(&target_a.x1).map(|(e, x)| *e + *x).collect();
        self.map.shares(&delta, target_a)
    }

    /// The triple `(h = σ⁻¹, a0)` of this model.
    pub fn triple(&self, a0: Bundle<T>) -> Result<HomTriple<T>> {
        HomTriple::new(HFamily::from_share_map(&self.map, self.inversion), a0)
    }
}

/// Maxima of the three Theorem-1 residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    /// `max ‖Y(a) − h⁻¹(x1 + ξ, p, x2)‖∞`, `ξ = φ⁻¹(Y(a0))`.
    pub linear_index: f64,
    /// `max ‖x1 + ξ − h(Y(a), p, x2)‖∞`.
    pub invertible_demand: f64,
    /// `max ‖H(Y(a)) − H(Y(a')) − (x1 − x1')‖∞` over grid pairs, `a0` included.
    pub homogeneity: f64,
    pub tol: f64,
    pub markets: usize,
    pub grid_size: usize,
    /// Failures of `h` or `h⁻¹`, counted as violations.
    pub failures: usize,
}

impl Theorem1Report {
    pub fn linear_index_passes(&self) -> bool {
        self.failures == 0 && self.linear_index <= self.tol
    }
    pub fn invertible_demand_passes(&self) -> bool {
        self.failures == 0 && self.invertible_demand <= self.tol
    }
    pub fn homogeneity_passes(&self) -> bool {
        self.failures == 0 && self.homogeneity <= self.tol
    }
    pub fn passes(&self) -> bool {
        self.linear_index_passes() && self.invertible_demand_passes() && self.homogeneity_passes()
    }
}

pub const THEOREM1_TOL: f64 = 1e-8;

/// Evaluates the three equivalent conditions for `triple` on every market of
/// `population` and every bundle of `grid`, with potential outcomes from the
/// population's true type maps.
pub fn verify_theorem1(
    triple: &HomTriple,
    grid: &[Bundle],
    population: &[MarketDraw],
    truth: &PopulationSpec,
) -> Result<Theorem1Report> {
    use rayon::prelude::*;
    let maps = truth.type_maps()?;
    let mut bundles = vec![triple.a0.clone()];
    bundles.extend(grid.iter().cloned());
    let per_market: Vec<(f64, f64, f64, usize)> = population
        .par_iter()
        .map(|m| {
            let mut failures = 0;
            let (mut li, mut inv, mut hom) = (0.0_f64, 0.0_f64, 0.0_f64);
            let ys: Vec<Option<SharesVector>> = bundles
                .iter()
                .map(|a| truth.potential_outcome(&maps, m.zeta, &m.xi, a).ok())
                .collect();
            let Some(y0) = ys[0].as_ref() else {
                return (f64::INFINITY, f64::INFINITY, f64::INFINITY, 1);
            };
            let xi = match triple.phi_inverse(y0.as_slice()) {
                Ok(v) => v,
                Err(_) => return (f64::INFINITY, f64::INFINITY, f64::INFINITY, 1),
            };
            let mut hs: Vec<Option<Vec<f64>>> = Vec::with_capacity(bundles.len());
            for (a, y) in bundles.iter().zip(&ys) {
                let Some(y) = y else {
                    failures += 1;
                    hs.push(None);
                    continue;
                };
                let index: Vec<f64> = a.x1.iter().zip(&xi).map(|(x, e)| x + e).collect();
                match triple.h.inverse(&index, a) {
                    Ok(pred) => li = li.max(max_abs_diff(y.as_slice(), pred.as_slice())),
                    Err(_) => failures += 1,
                }
                match triple.h.eval(y.as_slice(), a) {
                    Ok(t) => {
                        inv = inv.max(max_abs_diff(&index, &t));
                        hs.push(Some(t));
                    }
                    Err(_) => {
                        failures += 1;
                        hs.push(None);
                    }
                }
            }
            for (u, (hu, au)) in hs.iter().zip(&bundles).enumerate() {
                for (hv, av) in hs.iter().zip(&bundles).skip(u + 1) {
                    if let (Some(hu), Some(hv)) = (hu, hv) {
                        for k in 0..hu.len() {
                            let gap = hu[k] - hv[k] - (au.x1[k] - av.x1[k]);
                            hom = hom.max(gap.abs());
                        }
                    }
                }
            }
            (li, inv, hom, failures)
        })
        .collect();
    let mut report = Theorem1Report {
        linear_index: 0.0,
        invertible_demand: 0.0,
        homogeneity: 0.0,
        tol: THEOREM1_TOL,
        markets: population.len(),
        grid_size: grid.len(),
        failures: 0,
    };
    for (li, inv, hom, f) in per_market {
        report.linear_index = report.linear_index.max(li);
        report.invertible_demand = report.invertible_demand.max(inv);
        report.homogeneity = report.homogeneity.max(hom);
        report.failures += f;
    }
    Ok(report)
}

/// Finite-difference derivatives of a conversion map against the implicit
/// function formulas in `∂h/∂y` and `∂h/∂(p, x2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianReport {
    /// `dY/dx1` by central differences of `convert`, row-major `J × J`.
    pub dy_dx1: Vec<f64>,
    /// `(∂h/∂y)⁻¹`.
    pub dy_dx1_implied: Vec<f64>,
    /// `dY/dp` by central differences.
    pub dy_dp: Vec<f64>,
    /// `−(∂h/∂y)⁻¹ ∂h/∂p`.
    pub dy_dp_implied: Vec<f64>,
    /// One `J × J` block per `x2` column.
    pub dy_dx2: Vec<Vec<f64>>,
    pub dy_dx2_implied: Vec<Vec<f64>>,
    pub max_deviation: f64,
    /// `max |fd − implied| − rel · |implied|`; passes when `≤ abs`.
    pub excess: f64,
}

pub const JACOBIAN_STEP: f64 = 1e-5;
pub const JACOBIAN_REL_TOL: f64 = 1e-5;
pub const JACOBIAN_ABS_TOL: f64 = 1e-7;

impl JacobianReport {
    pub fn passes(&self) -> bool {
        self.excess <= JACOBIAN_ABS_TOL
    }
}

fn fd_columns<F>(j: usize, step: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, f64) -> Result<Vec<f64>>,
{
    let mut out = vec![0.0; j * j];
    for k in 0..j {
        let up = f(k, step)?;
        let dn = f(k, -step)?;
        for r in 0..j {
            out[r * j + k] = (up[r] - dn[r]) / (2.0 * step);
        }
    }
    Ok(out)
}

pub fn jacobian_identity_check(triple: &HomTriple, y: &SharesVector, a: &Bundle) -> Result<JacobianReport> {
    let j = a.j();
    a.check_len(y.len())?;
    let h = JACOBIAN_STEP;
    let ys = y.as_slice();
    let outside = y.outside();
    let conv = |b: &Bundle| triple.convert(ys, a, b).map(SharesVector::into_vec);

    let dy_dx1 = fd_columns(j, h, |k, s| {
        let mut b = a.clone();
        b.x1[k] += s;
        conv(&b)
    })?;
    let dy_dp = fd_columns(j, h, |k, s| {
        let mut b = a.clone();
        b.p[k] += s;
        conv(&b)
    })?;

    // ∂h/∂y with steps kept inside the simplex
    let mut dh_dy = vec![0.0; j * j];
    for k in 0..j {
        let s = h.min(0.1 * ys[k]).min(0.1 * outside);
        let mut up = ys.to_vec();
        let mut dn = ys.to_vec();
        up[k] += s;
        dn[k] -= s;
        let hu = triple.h.eval(&up, a)?;
        let hd = triple.h.eval(&dn, a)?;
        for r in 0..j {
            dh_dy[r * j + k] = (hu[r] - hd[r]) / (2.0 * s);
        }
    }
    let dy_dx1_implied = linalg::inverse(&dh_dy, j)?;
    let implied = |dh_dz: &[f64]| -> Vec<f64> {
        linalg::mat_mul(&dy_dx1_implied, dh_dz, j)
            .into_iter()
            .map(|v| -v)
            .collect()
    };
    let dh_dp = fd_columns(j, h, |k, s| {
        let mut b = a.clone();
        b.p[k] += s;
        triple.h.eval(ys, &b)
    })?;
    let dy_dp_implied = implied(&dh_dp);

    let mut dy_dx2 = Vec::new();
    let mut dy_dx2_implied = Vec::new();
    for col in 0..a.x2_dim() {
        let bump = |k: usize, s: f64| {
            let mut b = a.clone();
            b.x2[k][col] += s;
            b
        };
        dy_dx2.push(fd_columns(j, h, |k, s| conv(&bump(k, s)))?);
        let dh = fd_columns(j, h, |k, s| triple.h.eval(ys, &bump(k, s)))?;
        dy_dx2_implied.push(implied(&dh));
    }

    let mut max_deviation = 0.0_f64;
    let mut excess = f64::NEG_INFINITY;
    let pairs = std::iter::once((&dy_dx1, &dy_dx1_implied))
        .chain(std::iter::once((&dy_dp, &dy_dp_implied)))
        .chain(dy_dx2.iter().zip(&dy_dx2_implied));
    for (fd, an) in pairs {
        for (u, v) in fd.iter().zip(an) {
            let d = (u - v).abs();
            max_deviation = max_deviation.max(d);
            excess = excess.max(d - JACOBIAN_REL_TOL * v.abs());
        }
    }
    if !max_deviation.is_finite() {
        excess = f64::INFINITY;
    }
    Ok(JacobianReport {
        dy_dx1,
        dy_dx1_implied,
        dy_dp,
        dy_dp_implied,
        dy_dx2,
        dy_dx2_implied,
        max_deviation,
        excess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{Characteristic, Integration};
    use crate::population::{PriceLaw, ShockLaw};
    use crate::scalar::logistic;
    use crate::types::MixingSpec;

    fn lognormal_map() -> ShareMap {
        ShareMap::mixed_logit(
            0.0,
            vec![],
            MixingSpec::lognormal_1d(0.0, 0.5),
            vec![Characteristic::NegPrice],
            Integration::GaussHermite { nodes: 32 },
        )
        .unwrap()
    }

    fn b(x1: &[f64], p: &[f64]) -> Bundle {
        Bundle::new(x1.to_vec(), p.to_vec(), vec![]).unwrap()
    }

    #[test]
    fn predict_at_observed_bundle_is_identity() {
        let engine = CounterfactualEngine::new(lognormal_map(), InversionConfig::default());
        let a = b(&[0.2, -0.1], &[1.0, 2.0]);
        let y = SharesVector::new(vec![0.2, 0.15]).unwrap();
        let p = engine.predict(&y, &a, &a).unwrap();
        assert!(max_abs_diff(p.as_slice(), y.as_slice()) <= 1e-11);
    }

    #[test]
    fn predict_matches_truth_with_known_shock() {
        let map = lognormal_map();
        let engine = CounterfactualEngine::new(map.clone(), InversionConfig::default());
        let xi = [0.3, -0.8];
        let a = b(&[0.5, 0.0], &[1.2, 2.5]);
        let target = b(&[-0.5, 1.0], &[2.0, 0.8]);
        let delta = |bb: &Bundle| -> Vec<f64> { bb.x1.iter().zip(&xi).map(|(x, e)| x + e).collect() };
        let y = map.shares(&delta(&a), &a).unwrap();
        let truth = map.shares(&delta(&target), &target).unwrap();
        let pred = engine.predict(&y, &a, &target).unwrap();
        assert!(max_abs_diff(pred.as_slice(), truth.as_slice()) <= 1e-8);
    }

    #[test]
    fn convert_with_logit_h_matches_engine() {
        let engine = CounterfactualEngine::new(ShareMap::plain_logit(1.3, vec![]), InversionConfig::default());
        let triple = HomTriple::new(HFamily::logit_inverse(1.3), b(&[0.0], &[1.5])).unwrap();
        let a = b(&[0.4], &[1.0]);
        let target = b(&[-0.2], &[2.2]);
        let y = SharesVector::new(vec![0.37]).unwrap();
        let c = triple.convert(y.as_slice(), &a, &target).unwrap();
        let p = engine.predict(&y, &a, &target).unwrap();
        assert!((c[0] - p[0]).abs() <= 1e-10);
        // phi is the logistic when h is the logit inverse at a0 = (0, 1.5)
        assert!((triple.phi(&[0.3]).unwrap()[0] - logistic(0.3 - 1.3 * 1.5)).abs() < 1e-15);
    }

    #[test]
    fn conversion_identity_and_composition() {
        let map = lognormal_map();
        let triple = HomTriple::new(HFamily::from_share_map(&map, InversionConfig::default()), b(&[0.0, 0.0], &[1.0, 1.0])).unwrap();
        let a = b(&[0.0, 0.3], &[1.0, 2.0]);
        let a1 = b(&[0.5, -0.2], &[1.5, 1.0]);
        let a2 = b(&[-0.3, 0.1], &[2.5, 0.7]);
        let y = SharesVector::new(vec![0.25, 0.3]).unwrap();
        let same = triple.convert(y.as_slice(), &a, &a).unwrap();
        assert!(max_abs_diff(same.as_slice(), y.as_slice()) <= 1e-12);
        let via = triple.convert(triple.convert(y.as_slice(), &a, &a1).unwrap().as_slice(), &a1, &a2).unwrap();
        let direct = triple.convert(y.as_slice(), &a, &a2).unwrap();
        assert!(max_abs_diff(via.as_slice(), direct.as_slice()) <= 1e-10);
        let back = triple.convert(triple.convert(y.as_slice(), &a, &a1).unwrap().as_slice(), &a1, &a).unwrap();
        assert!(max_abs_diff(back.as_slice(), y.as_slice()) <= 1e-10);
    }

    #[test]
    fn identity_h_inverse_reports_simplex_exit() {
        let triple = HomTriple::new(HFamily::<f64>::Identity, b(&[0.0], &[1.0])).unwrap();
        let err = triple.convert(&[0.9], &b(&[0.0], &[1.0]), &b(&[0.5], &[1.0])).unwrap_err();
        assert!(matches!(err, Error::InversionFailure(_)));
    }

    #[test]
    fn spline_and_affine_round_trip() {
        let spline = HFamily::MonotoneSpline {
            knots_y: vec![0.1, 0.3, 0.6, 0.9],
            knots_t: vec![-2.0, -0.5, 0.4, 2.0],
        };
        let h = HFamily::Affine {
            inner: Box::new(spline),
            matrix: vec![2.0, 0.5, 0.0, 1.0],
            offset: vec![0.3, -0.1],
        };
        h.validate().unwrap();
        let a = b(&[0.0, 0.0], &[1.0, 1.0]);
        let y = [0.2, 0.35];
        let t = h.eval(&y, &a).unwrap();
        let back = h.inverse(&t, &a).unwrap();
        assert!(max_abs_diff(back.as_slice(), &y) < 1e-14);
        let bad = HFamily::<f64>::MonotoneSpline {
            knots_y: vec![0.1, 0.1],
            knots_t: vec![0.0, 1.0],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shifted_family_moves_by_constant() {
        let a = b(&[0.0], &[1.0]);
        let h = HFamily::logit_inverse(1.0);
        let hs = h.clone().shifted(vec![0.7]);
        let y = [0.4];
        assert!((hs.eval(&y, &a).unwrap()[0] - h.eval(&y, &a).unwrap()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn triples_serialize() {
        let t = HomTriple::new(HFamily::from_share_map(&lognormal_map(), InversionConfig::default()), b(&[0.0], &[1.0])).unwrap();
        let text = toml::to_string(&t).unwrap();
        let back: HomTriple = toml::from_str(&text).unwrap();
        assert_eq!(back, t);
    }

    fn theorem1_population(two_types: bool) -> PopulationSpec {
        let mut spec = if two_types {
            PopulationSpec::fig1_default()
        } else {
            PopulationSpec::single_type_default()
        };
        spec.market_count = 40;
        spec.demand.integration = Integration::GaussHermite { nodes: 32 };
        spec
    }

    fn price_grid() -> Vec<Bundle> {
        (0..10)
            .map(|k| b(&[-0.5 + 0.1 * k as f64], &[0.6 + 0.25 * k as f64]))
            .collect()
    }

    #[test]
    fn theorem1_holds_for_single_type_and_fails_for_two() {
        let spec = theorem1_population(false);
        let pop = crate::population::sample_population(&spec).unwrap();
        let map = spec.type_maps().unwrap().remove(0);
        let triple = HomTriple::new(HFamily::from_share_map(&map, InversionConfig::default()), spec.median_bundle()).unwrap();
        let r = verify_theorem1(&triple, &price_grid(), &pop, &spec).unwrap();
        assert!(r.passes(), "{r:?}");

        let spec2 = theorem1_population(true);
        let pop2 = crate::population::sample_population(&spec2).unwrap();
        let r2 = verify_theorem1(&triple, &price_grid(), &pop2, &spec2).unwrap();
        assert!(r2.homogeneity > 0.01, "{r2:?}");
    }

    #[test]
    fn theorem1_plain_logit() {
        let mut spec = theorem1_population(false);
        spec.demand.kind = ShareMapKind::PlainLogit;
        spec.demand.alpha = 0.8;
        spec.demand.random_on.clear();
        spec.mixing_by_type.clear();
        spec.price_law = PriceLaw::Uniform { lo: 0.5, hi: 3.0 };
        spec.xi_law = ShockLaw::Normal { mean: 0.0, sd: 1.0 };
        let pop = crate::population::sample_population(&spec).unwrap();
        let triple = HomTriple::new(HFamily::logit_inverse(0.8), spec.median_bundle()).unwrap();
        let r = verify_theorem1(&triple, &price_grid(), &pop, &spec).unwrap();
        assert!(r.passes(), "{r:?}");
    }

    #[test]
    fn logit_jacobian_at_half() {
        let triple = HomTriple::new(HFamily::logit_inverse(0.0), b(&[0.0], &[1.0])).unwrap();
        let y = SharesVector::new(vec![0.5]).unwrap();
        let r = jacobian_identity_check(&triple, &y, &b(&[0.0], &[1.0])).unwrap();
        assert!((r.dy_dx1[0] - 0.25).abs() < 1e-9);
        assert!(r.passes(), "{r:?}");
    }

    #[test]
    fn x1_excluded_from_elasticities() {
        let map = lognormal_map();
        let triple = HomTriple::new(HFamily::from_share_map(&map, InversionConfig::default()), b(&[0.0, 0.0], &[1.0, 1.0])).unwrap();
        let y = SharesVector::new(vec![0.2, 0.3]).unwrap();
        let r1 = jacobian_identity_check(&triple, &y, &b(&[0.0, 0.0], &[1.2, 2.0])).unwrap();
        let r2 = jacobian_identity_check(&triple, &y, &b(&[1.5, -0.7], &[1.2, 2.0])).unwrap();
        assert!(max_abs_diff(&r1.dy_dx1, &r2.dy_dx1) <= 1e-8);
        assert!(r1.passes() && r2.passes());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn jacobian_identity_on_random_interior_points(
                y in proptest::collection::vec(0.05..0.3_f64, 2),
                p in proptest::collection::vec(0.5..3.0_f64, 2),
                x2 in proptest::collection::vec(-1.0..1.0_f64, 2),
            ) {
                let map = ShareMap::mixed_logit(
                    0.5,
                    vec![0.4],
                    MixingSpec::Normal { mean: vec![0.0], sd: vec![0.8] },
                    vec![Characteristic::X2(0)],
                    Integration::GaussHermite { nodes: 32 },
                ).unwrap();
                let a = Bundle::new(vec![0.0; 2], p, x2.iter().map(|v| vec![*v]).collect()).unwrap();
                let triple = HomTriple::new(HFamily::from_share_map(&map, InversionConfig::default()), a.clone()).unwrap();
                let y = SharesVector::new(y).unwrap();
                let r = jacobian_identity_check(&triple, &y, &a).unwrap();
                prop_assert!(r.max_deviation <= 1e-5, "{}", r.max_deviation);
                prop_assert!(r.passes(), "excess {}", r.excess);
            }

            #[test]
            fn conversions_form_a_group(
                y in proptest::collection::vec(0.05..0.3_f64, 2),
                x in proptest::collection::vec(-1.0..1.0_f64, 6),
                p in proptest::collection::vec(0.5..3.0_f64, 6),
            ) {
                let map = lognormal_map();
                let triple = HomTriple::new(HFamily::from_share_map(&map, InversionConfig::default()), b(&[0.0, 0.0], &[1.0, 1.0])).unwrap();
                let a = b(&x[0..2], &p[0..2]);
                let a1 = b(&x[2..4], &p[2..4]);
                let a2 = b(&x[4..6], &p[4..6]);
                let Ok(y1) = triple.convert(&y, &a, &a1) else { return Ok(()); };
                let Ok(y2) = triple.convert(y1.as_slice(), &a1, &a2) else { return Ok(()); };
                let direct = triple.convert(&y, &a, &a2).unwrap();
                prop_assert!(max_abs_diff(y2.as_slice(), direct.as_slice()) <= 1e-10);
                let back = triple.convert(y1.as_slice(), &a1, &a).unwrap();
                prop_assert!(max_abs_diff(back.as_slice(), &y) <= 1e-10);
            }

            #[test]
            fn predictions_depend_only_on_observables(
                y in proptest::collection::vec(0.05..0.3_f64, 2),
                target_p in proptest::collection::vec(0.5..3.0_f64, 2),
            ) {
                let engine = CounterfactualEngine::new(lognormal_map(), InversionConfig::default());
                let a = b(&[0.1, 0.0], &[1.0, 2.0]);
                let t = b(&[0.0, 0.2], &target_p);
                let ys = SharesVector::new(y).unwrap();
                let first = engine.predict(&ys, &a, &t).unwrap();
                let second = engine.predict(&ys.clone(), &a.clone(), &t).unwrap();
                prop_assert_eq!(first, second);
            }
        }
    }
}
