//! Extrapolation from averages.
//!
//! A [`RuleFamily`] is a parametric class of rules `H_θ(y, a)`, invertible in
//! `y`. [`solve_orthogonality`] picks the member whose transformed outcome is
//! orthogonal to the instruments by two-step GMM, and [`extrapolate`] predicts
//! `Ỹ(a') = H⁻¹(H(Y, A), a')`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{CounterfactualEngine, HFamily, HomTriple};
use crate::demand::{ShareMap, ShareMapKind};
use crate::diagnostics::monomials;
use crate::error::{Error, Result};
use crate::inversion::InversionConfig;
use crate::optimize::{gauss_newton, latin_hypercube, nelder_mead, NelderMeadConfig};
use crate::population::PopulationSpec;
use crate::scalar::{logistic, max_abs_diff};
use crate::types::{Bundle, MarketDraw, SharesVector};

/// Monotone outcome transform `f` of the demeaned family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    Identity,
    Log,
    /// Elementwise `log(y / (1 − y))`.
    Logit,
    /// `log(y_j / y_0)` with `y_0` the outside share.
    LogRatio,
}

impl Transform {
    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        let out: Vec<f64> = match self {
            Transform::Identity => y.to_vec(),
            Transform::Log => y.iter().map(|v| v.ln()).collect(),
            Transform::Logit => y.iter().map(|v| (v / (1.0 - v)).ln()).collect(),
            Transform::LogRatio => SharesVector::new(y.to_vec())?.log_ratios(),
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::InversionFailure(format!("{self:?} is undefined at {y:?}")));
        }
        Ok(out)
    }

    pub fn invert(&self, t: &[f64]) -> Result<Vec<f64>> {
        Ok(match self {
            Transform::Identity => t.to_vec(),
            Transform::Log => t.iter().map(|v| v.exp()).collect(),
            Transform::Logit => t.iter().map(|v| logistic(*v)).collect(),
            Transform::LogRatio => SharesVector::from_log_ratios(t)
                .map_err(|e| Error::InversionFailure(e.to_string()))?
                .into_vec(),
        })
    }
}

/// Parametrization of the mean function `μ(a)` of the demeaned family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MuBasis {
    /// One free value per product and support bundle: `θ[k·J + j] = μ_j(a_k)`.
    CellIndicators { cells: Vec<Bundle> },
    /// `μ_j(a) = Σ_k θ_k m_k(x1_j, p_j, x2_j)` over monomials `m_k` of total
    /// degree `≤ degree`, shared across products.
    Polynomial { degree: usize },
}

/// The parametric `h_θ(y, p, x2)` of the partially linear family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IndexFamily {
    /// `θ = [c, α, γ]`: `log(y_j / y_0) − c + α p_j − x2_jᵀγ`.
    Logit { x2_dim: usize },
    /// As `Logit` with `α = θ₁²`; `θ₁` and `−θ₁` are observationally
    /// equivalent.
    LogitSquared { x2_dim: usize },
    /// A fixed `h` with no free parameters.
    Fixed { h: HFamily },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RuleKind {
    /// `H(y, a) = f(y) − μ(a)`.
    Demeaned { f: Transform, mu: MuBasis },
    /// `H(y, a)` = interpolated empirical CDF of scalar `Y` among markets at
    /// `a`; `cells` empty means the distinct observed bundles.
    QuantileRank {
        #[serde(default)]
        cells: Vec<Bundle>,
    },
    /// `H(y, a) = h_θ(y, p, x2) − x1`.
    PartiallyLinear { h: IndexFamily },
}

/// Strictly increasing knots of one interpolated CDF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankKnots {
    pub y: Vec<f64>,
    pub u: Vec<f64>,
}

/// A class of extrapolation rules and, once fitted, its selected member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleFamily {
    pub kind: RuleKind,
    #[serde(default)]
    pub theta: Vec<f64>,
    /// One entry per cell of the quantile-rank family.
    #[serde(default)]
    pub rank_knots: Vec<RankKnots>,
}

fn interpolate(xs: &[f64], ys: &[f64], v: f64) -> f64 {
    let n = xs.len();
    let k = match xs.partition_point(|x| *x <= v) {
        0 => 0,
        k if k >= n => n - 2,
        k => k - 1,
    };
    ys[k] + (v - xs[k]) * (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k])
}

fn own_features(a: &Bundle, j: usize) -> Vec<f64> {
    let mut f = vec![a.x1[j], a.p[j]];
    f.extend_from_slice(a.x2_row(j));
    f
}

impl RuleFamily {
    pub fn new(kind: RuleKind) -> Self {
        Self {
            kind,
            theta: Vec::new(),
            rank_knots: Vec::new(),
        }
    }

    /// Number of free parameters for outcomes of length `j`.
    pub fn theta_dim(&self, j: usize, x2_dim: usize) -> usize {
        match &self.kind {
            RuleKind::Demeaned { mu, .. } => match mu {
                MuBasis::CellIndicators { cells } => cells.len() * j,
                MuBasis::Polynomial { degree } => monomials(&vec![0.0; 2 + x2_dim], *degree).len(),
            },
            RuleKind::QuantileRank { .. } => 0,
            RuleKind::PartiallyLinear { h } => match h {
                IndexFamily::Logit { x2_dim } | IndexFamily::LogitSquared { x2_dim } => 2 + x2_dim,
                IndexFamily::Fixed { .. } => 0,
            },
        }
    }

    fn cell_of(cells: &[Bundle], a: &Bundle) -> Result<usize> {
        cells
            .iter()
            .position(|c| c == a)
            .ok_or_else(|| Error::UnknownTreatment(format!("bundle {a:?} is not a fitted cell")))
    }

    fn mu(&self, mu: &MuBasis, a: &Bundle) -> Result<Vec<f64>> {
        let j = a.j();
        match mu {
            MuBasis::CellIndicators { cells } => {
                let k = Self::cell_of(cells, a)?;
                self.theta
                    .get(k * j..(k + 1) * j)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::dim("theta", cells.len() * j, self.theta.len()))
            }
            MuBasis::Polynomial { degree } => (0..j)
                .map(|jj| {
                    let m = monomials(&own_features(a, jj), *degree);
                    if m.len() != self.theta.len() {
                        return Err(Error::dim("theta", m.len(), self.theta.len()));
                    }
                    Ok(m.iter().zip(&self.theta).map(|(u, t)| u * t).sum())
                })
                .collect(),
        }
    }

    /// The fitted `h` of the partially linear family.
    pub fn index_h(&self) -> Result<HFamily> {
        let RuleKind::PartiallyLinear { h } = &self.kind else {
            return Err(Error::InvalidConfig("not a partially linear family".into()));
        };
        let logit = |alpha: f64| -> Result<HFamily> {
            if self.theta.len() < 2 {
                return Err(Error::dim("theta", 2, self.theta.len()));
            }
            Ok(HFamily::LogitInverse {
                alpha,
                gamma: self.theta[2..].to_vec(),
                intercept: self.theta[0],
            })
        };
        match h {
            IndexFamily::Logit { .. } => logit(*self.theta.get(1).unwrap_or(&f64::NAN)),
            IndexFamily::LogitSquared { .. } => logit(self.theta.get(1).map_or(f64::NAN, |s| s * s)),
            IndexFamily::Fixed { h } => Ok(h.clone()),
        }
    }

    fn knots(&self, cells: &[Bundle], a: &Bundle) -> Result<&RankKnots> {
        let k = Self::cell_of(cells, a)?;
        self.rank_knots
            .get(k)
            .ok_or_else(|| Error::dim("rank_knots", cells.len(), self.rank_knots.len()))
    }

    /// `H(y, a)`.
    pub fn transform(&self, y: &[f64], a: &Bundle) -> Result<Vec<f64>> {
        a.check_len(y.len())?;
        match &self.kind {
            RuleKind::Demeaned { f, mu } => {
                let fy = f.apply(y)?;
                Ok(fy.iter().zip(self.mu(mu, a)?).map(|(u, m)| u - m).collect())
            }
            RuleKind::QuantileRank { cells } => {
                let kn = self.knots(cells, a)?;
                Ok(vec![interpolate(&kn.y, &kn.u, y[0])])
            }
            RuleKind::PartiallyLinear { .. } => {
                let t = self.index_h()?.eval(y, a)?;
                Ok(t.iter().zip(&a.x1).map(|(v, x)| v - x).collect())
            }
        }
    }

    /// `y` with `H(y, a) = t`.
    pub fn inverse_transform(&self, t: &[f64], a: &Bundle) -> Result<Vec<f64>> {
        a.check_len(t.len())?;
        match &self.kind {
            RuleKind::Demeaned { f, mu } => {
                let s: Vec<f64> = t.iter().zip(self.mu(mu, a)?).map(|(u, m)| u + m).collect();
                f.invert(&s)
            }
            RuleKind::QuantileRank { cells } => {
                let kn = self.knots(cells, a)?;
                Ok(vec![interpolate(&kn.u, &kn.y, t[0])])
            }
            RuleKind::PartiallyLinear { .. } => {
                let s: Vec<f64> = t.iter().zip(&a.x1).map(|(v, x)| v + x).collect();
                Ok(self.index_h()?.inverse(&s, a)?.into_vec())
            }
        }
    }
}

/// Test functions `m` applied to the transformed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TestFunctionSet {
    /// `m(h) = h`.
    MeanIndependence,
    /// `m(h) = 1(h_j ≤ c) − P̂(H_j ≤ c)` for every coordinate and cutpoint.
    IndicatorGrid { cutpoints: Vec<f64> },
}

impl TestFunctionSet {
    pub fn validate(&self) -> Result<()> {
        if let TestFunctionSet::IndicatorGrid { cutpoints } = self {
            if cutpoints.is_empty()
                || cutpoints.iter().any(|c| !c.is_finite())
                || cutpoints.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(Error::InvalidConfig("cutpoints must be finite and strictly increasing".into()));
            }
        }
        Ok(())
    }

    fn is_smooth(&self) -> bool {
        matches!(self, TestFunctionSet::MeanIndependence)
    }
}

/// Instrument functions `b(Z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InstrumentBasis {
    /// Monomials of total degree `≤ degree` in the standardized `Z`.
    Polynomial { degree: usize },
    /// `1(Z₀ = v)` for each listed value.
    Indicators { values: Vec<f64> },
}

impl InstrumentBasis {
    fn rows(&self, data: &[MarketDraw]) -> Result<Vec<Vec<f64>>> {
        let zs: Vec<&[f64]> = data.iter().map(|m| m.z.as_slice()).collect();
        self.rows_for(&zs)
    }

    /// Basis rows `b(z_i)` for a sample of instrument vectors.
    pub fn rows_for(&self, zs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if zs.is_empty() {
            return Err(Error::InsufficientData("no instrument observations".into()));
        }
        match self {
            InstrumentBasis::Polynomial { degree } => {
                let d = zs[0].len();
                if zs.iter().any(|z| z.len() != d) {
                    return Err(Error::InvalidConfig("instrument length varies across markets".into()));
                }
                let n = zs.len() as f64;
                let mean: Vec<f64> = (0..d).map(|k| zs.iter().map(|z| z[k]).sum::<f64>() / n).collect();
                let sd: Vec<f64> = (0..d)
                    .map(|k| {
                        let v = zs.iter().map(|z| (z[k] - mean[k]).powi(2)).sum::<f64>() / n;
                        if v > 0.0 {
                            v.sqrt()
                        } else {
                            1.0
                        }
                    })
                    .collect();
                Ok(zs
                    .iter()
                    .map(|z| {
                        let u: Vec<f64> = (0..d).map(|k| (z[k] - mean[k]) / sd[k]).collect();
                        monomials(&u, *degree)
                    })
                    .collect())
            }
            InstrumentBasis::Indicators { values } => {
                if values.is_empty() {
                    return Err(Error::InvalidConfig("indicator basis needs values".into()));
                }
                zs.iter()
                    .map(|z| {
                        let z0 = *z.first().ok_or_else(|| Error::InvalidConfig("empty instrument".into()))?;
                        Ok(values.iter().map(|v| f64::from(u8::from(z0 == *v))).collect())
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub starts: usize,
    pub seed: u64,
    pub start_lo: f64,
    pub start_hi: f64,
    /// Starts whose criteria differ by at most this (relative to `max(1, Q)`)
    /// are ties.
    pub criterion_tol: f64,
    /// Tied starts further apart than this in `θ` make the solution non-unique.
    pub theta_tol: f64,
    pub two_step: bool,
    pub basis: InstrumentBasis,
    pub simplex_evals: usize,
    pub polish_iter: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            starts: 16,
            seed: 0,
            start_lo: -3.0,
            start_hi: 3.0,
            criterion_tol: 1e-10,
            theta_tol: 1e-6,
            two_step: true,
            basis: InstrumentBasis::Polynomial { degree: 2 },
            simplex_evals: 2000,
            polish_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmmReport {
    pub theta: Vec<f64>,
    /// `ḡᵀ W ḡ` at `θ̂` under the final weight.
    pub criterion: f64,
    pub first_step_criterion: f64,
    pub starts: usize,
    /// Starts tied with the best criterion.
    pub tied_starts: usize,
    pub unique: bool,
    pub moments: usize,
    pub observations: usize,
}

/// Fast evaluation of `H_θ(Y_i, A_i)` over a fixed sample.
enum Prepared {
    Cells { fy: Vec<Vec<f64>>, cell: Vec<usize>, j: usize },
    Poly { fy: Vec<Vec<f64>>, design: Vec<Vec<Vec<f64>>> },
    Logit { lr: Vec<Vec<f64>>, a: Vec<Bundle>, squared: bool },
    Fixed { h: Vec<Vec<f64>> },
}

impl Prepared {
    fn new(family: &RuleFamily, data: &[MarketDraw]) -> Result<Self> {
        match &family.kind {
            RuleKind::Demeaned { f, mu } => {
                let fy = data.iter().map(|m| f.apply(m.y.as_slice())).collect::<Result<Vec<_>>>()?;
                match mu {
                    MuBasis::CellIndicators { cells } => Ok(Prepared::Cells {
                        fy,
                        cell: data.iter().map(|m| RuleFamily::cell_of(cells, &m.a)).collect::<Result<_>>()?,
                        j: data[0].a.j(),
                    }),
                    MuBasis::Polynomial { degree } => Ok(Prepared::Poly {
                        fy,
                        design: data
                            .iter()
                            .map(|m| (0..m.a.j()).map(|jj| monomials(&own_features(&m.a, jj), *degree)).collect())
                            .collect(),
                    }),
                }
            }
            RuleKind::PartiallyLinear { h } => match h {
                IndexFamily::Logit { .. } | IndexFamily::LogitSquared { .. } => Ok(Prepared::Logit {
                    lr: data.iter().map(|m| m.y.log_ratios()).collect(),
                    a: data.iter().map(|m| m.a.clone()).collect(),
                    squared: matches!(h, IndexFamily::LogitSquared { .. }),
                }),
                IndexFamily::Fixed { .. } => Ok(Prepared::Fixed {
                    h: data
                        .iter()
                        .map(|m| family.transform(m.y.as_slice(), &m.a))
                        .collect::<Result<_>>()?,
                }),
            },
            RuleKind::QuantileRank { .. } => Ok(Prepared::Fixed {
                h: data
                    .iter()
                    .map(|m| family.transform(m.y.as_slice(), &m.a))
                    .collect::<Result<_>>()?,
            }),
        }
    }

    fn h(&self, theta: &[f64], i: usize) -> Vec<f64> {
        let mut out = Vec::new();
        self.h_into(theta, i, &mut out);
        out
    }

    fn h_into(&self, theta: &[f64], i: usize, out: &mut Vec<f64>) {
        out.clear();
        match self {
            Prepared::Cells { fy, cell, j } => {
                let k = cell[i];
                out.extend(fy[i].iter().zip(&theta[k * j..(k + 1) * j]).map(|(u, t)| u - t));
            }
            Prepared::Poly { fy, design } => out.extend(
                fy[i]
                    .iter()
                    .zip(&design[i])
                    .map(|(u, row)| u - row.iter().zip(theta).map(|(m, t)| m * t).sum::<f64>()),
            ),
            Prepared::Logit { lr, a, squared } => {
                let alpha = if *squared { theta[1] * theta[1] } else { theta[1] };
                let b = &a[i];
                out.extend(lr[i].iter().enumerate().map(|(jj, r)| {
                    let g: f64 = b.x2_row(jj).iter().zip(&theta[2..]).map(|(x, c)| x * c).sum();
                    r - theta[0] + alpha * b.p[jj] - g - b.x1[jj]
                }));
            }
            Prepared::Fixed { h } => out.extend_from_slice(&h[i]),
        }
    }
}

struct Moments<'a> {
    prepared: Prepared,
    basis: Vec<Vec<f64>>,
    tests: &'a TestFunctionSet,
}

impl Moments<'_> {
    fn transformed(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        (0..self.basis.len()).map(|i| self.prepared.h(theta, i)).collect()
    }

    /// Per-observation test values `m(H_i)`.
    fn tested(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let hs = self.transformed(theta);
        match self.tests {
            TestFunctionSet::MeanIndependence => hs,
            TestFunctionSet::IndicatorGrid { cutpoints } => {
                let n = hs.len() as f64;
                let ind: Vec<Vec<f64>> = hs
                    .iter()
                    .map(|h| {
                        h.iter()
                            .flat_map(|v| cutpoints.iter().map(move |c| f64::from(u8::from(*v <= *c))))
                            .collect()
                    })
                    .collect();
                let k = ind[0].len();
                let mean: Vec<f64> = (0..k).map(|c| ind.iter().map(|r| r[c]).sum::<f64>() / n).collect();
                ind.into_iter()
                    .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
                    .collect()
            }
        }
    }

    fn per_obs(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        self.tested(theta)
            .iter()
            .zip(&self.basis)
            .map(|(m, b)| m.iter().flat_map(|u| b.iter().map(move |v| u * v)).collect())
            .collect()
    }

    fn mean(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let n = self.basis.len();
        let mut g = Vec::new();
        let accumulate = |m: &[f64], b: &[f64], g: &mut Vec<f64>| {
            if g.is_empty() {
                g.resize(m.len() * b.len(), 0.0);
            }
            for (r, u) in m.iter().enumerate() {
                let row = &mut g[r * b.len()..(r + 1) * b.len()];
                for (acc, v) in row.iter_mut().zip(b) {
                    if *v != 0.0 {
                        *acc += u * v;
                    }
                }
            }
        };
        if self.tests.is_smooth() {
            let mut h = Vec::new();
            for i in 0..n {
                self.prepared.h_into(theta, i, &mut h);
                accumulate(&h, &self.basis[i], &mut g);
            }
        } else {
            for (m, b) in self.tested(theta).iter().zip(&self.basis) {
                accumulate(m, b, &mut g);
            }
        }
        g.iter_mut().for_each(|v| *v /= n as f64);
        g.iter().all(|v| v.is_finite()).then_some(g)
    }
}

fn quadratic(g: &[f64], w: &DMatrix<f64>) -> f64 {
    let v = DVector::from_column_slice(g);
    (v.transpose() * w * &v)[(0, 0)]
}

fn minimize(
    moments: &Moments,
    w: &DMatrix<f64>,
    x0: &[f64],
    smooth: bool,
    cfg: &GmmConfig,
) -> (Vec<f64>, f64) {
    let q = |t: &[f64]| moments.mean(t).map_or(f64::INFINITY, |g| quadratic(&g, w));
    let nm = nelder_mead(
        q,
        x0,
        &NelderMeadConfig {
            max_evals: cfg.simplex_evals,
            f_tol: cfg.criterion_tol,
            // the polish finishes smooth problems
            x_tol: if smooth { 1e-6 } else { 1e-10 },
            ..NelderMeadConfig::default()
        },
    );
    if !smooth {
        return (nm.x, nm.value);
    }
    let polished = gauss_newton(|t| moments.mean(t), w, &nm.x, cfg.polish_iter);
    if polished.value <= nm.value {
        (polished.x, polished.value)
    } else {
        (nm.x, nm.value)
    }
}

fn rank_knots(values: &mut [f64]) -> Result<RankKnots> {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mut y = Vec::new();
    let mut u = Vec::new();
    let mut k = 0;
    while k < values.len() {
        let mut e = k;
        while e + 1 < values.len() && values[e + 1] == values[k] {
            e += 1;
        }
        y.push(values[k]);
        u.push(((k + e) as f64 / 2.0 + 0.5) / n);
        k = e + 1;
    }
    if y.len() < 2 {
        return Err(Error::InsufficientData("a rank cell needs two distinct outcomes".into()));
    }
    Ok(RankKnots { y, u })
}

fn distinct_bundles(data: &[MarketDraw]) -> Vec<Bundle> {
    let mut cells: Vec<Bundle> = Vec::new();
    for m in data {
        if !cells.contains(&m.a) {
            cells.push(m.a.clone());
        }
    }
    let key = |b: &Bundle| b.features();
    cells.sort_by(|a, b| {
        key(a)
            .iter()
            .zip(key(b).iter())
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    cells
}

/// Fits `family` by two-step GMM on `E[m(H_θ(Y, A)) ⊗ b(Z)] = 0`.
///
/// Step one uses `W = I` from Latin-hypercube starts, each refined by the
/// simplex search and, for smooth test functions, a Gauss–Newton polish.
/// Ties in the step-one criterion at distinct `θ` raise
/// [`Error::NonUnique`]. Step two reweights by the pseudo-inverse of the
/// moment covariance at the step-one estimate.
pub fn solve_orthogonality(
    family: &RuleFamily,
    tests: &TestFunctionSet,
    data: &[MarketDraw],
    cfg: &GmmConfig,
) -> Result<(RuleFamily, GmmReport)> {
    tests.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("no observations".into()));
    }
    if cfg.starts == 0 || !(cfg.start_lo < cfg.start_hi) {
        return Err(Error::InvalidConfig("GMM needs starts > 0 and start_lo < start_hi".into()));
    }
    let j = data[0].a.j();
    let x2_dim = data[0].a.x2_dim();
    if data.iter().any(|m| m.a.j() != j || m.a.x2_dim() != x2_dim) {
        return Err(Error::InvalidConfig("markets differ in product count or x2 width".into()));
    }
    let mut fitted = family.clone();
    if let RuleKind::QuantileRank { cells } = &fitted.kind {
        if j != 1 {
            return Err(Error::InvalidConfig("the quantile-rank family needs scalar outcomes".into()));
        }
        let cells = if cells.is_empty() { distinct_bundles(data) } else { cells.clone() };
        let mut knots = Vec::with_capacity(cells.len());
        for c in &cells {
            let mut ys: Vec<f64> = data.iter().filter(|m| &m.a == c).map(|m| m.y[0]).collect();
            knots.push(rank_knots(&mut ys)?);
        }
        fitted.kind = RuleKind::QuantileRank { cells };
        fitted.rank_knots = knots;
    }
    if let RuleKind::PartiallyLinear { h: IndexFamily::Logit { x2_dim: d } | IndexFamily::LogitSquared { x2_dim: d } } = &fitted.kind {
        if *d != x2_dim {
            return Err(Error::dim("index family x2 width", x2_dim, *d));
        }
    }
    let dim = fitted.theta_dim(j, x2_dim);
    if data.len() < 10 * dim.max(1) {
        return Err(Error::InsufficientData(format!(
            "{} observations for {dim} parameters (need 10 per parameter)",
            data.len()
        )));
    }
    let moments = Moments {
        prepared: Prepared::new(&fitted, data)?,
        basis: cfg.basis.rows(data)?,
        tests,
    };
    let width = moments
        .mean(&vec![0.0; dim])
        .map(|g| g.len())
        .ok_or_else(|| Error::NoConvergence { iterations: 0, residual: f64::NAN })?;
    let smooth = tests.is_smooth();
    let identity = DMatrix::identity(width, width);

    let starts = if dim == 0 {
        vec![Vec::new()]
    } else {
        latin_hypercube(cfg.starts, dim, cfg.start_lo, cfg.start_hi, cfg.seed)
    };
    let results: Vec<(Vec<f64>, f64)> = starts
        .par_iter()
        .map(|x0| minimize(&moments, &identity, x0, smooth, cfg))
        .collect();
    let lex = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    let best = results
        .iter()
        .filter(|r| r.1.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex(&a.0, &b.0)))
        .cloned()
        .ok_or_else(|| Error::NoConvergence {
            iterations: cfg.simplex_evals,
            residual: f64::INFINITY,
        })?;
    let tie = cfg.criterion_tol * best.1.max(1.0);
    let tied: Vec<&(Vec<f64>, f64)> = results.iter().filter(|r| r.1 - best.1 <= tie).collect();
    let spread = tied
        .iter()
        .map(|r| max_abs_diff(&r.0, &best.0))
        .fold(0.0_f64, f64::max);
    if spread > cfg.theta_tol {
        return Err(Error::NonUnique(format!(
            "{} starts reach criterion {:.3e} at parameters up to {spread:.3e} apart",
            tied.len(),
            best.1
        )));
    }

    let (theta, criterion) = if cfg.two_step && dim > 0 {
        let g_i = moments.per_obs(&best.0);
        let n = g_i.len() as f64;
        let gbar: Vec<f64> = (0..width).map(|k| g_i.iter().map(|g| g[k]).sum::<f64>() / n).collect();
        let mut s = DMatrix::zeros(width, width);
        for g in &g_i {
            let d = DVector::from_iterator(width, g.iter().zip(&gbar).map(|(u, m)| u - m));
            s += &d * d.transpose() / n;
        }
        let top = s.clone().svd(false, false).singular_values.max();
        let w = s
            .pseudo_inverse(1e-12 * top.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::InversionFailure(format!("moment covariance: {e}")))?;
        minimize(&moments, &w, &best.0, smooth, cfg)
    } else {
        best.clone()
    };
    fitted.theta = theta.clone();
    let report = GmmReport {
        theta,
        criterion,
        first_step_criterion: best.1,
        starts: starts.len(),
        tied_starts: tied.len(),
        unique: true,
        moments: width,
        observations: data.len(),
    };
    Ok((fitted, report))
}

/// `Ỹ(target) = H⁻¹(H(y, a), target)`; `y` itself when `target == a`.
pub fn extrapolate(fitted: &RuleFamily, y: &[f64], a: &Bundle, target: &Bundle) -> Result<Vec<f64>> {
    if target == a {
        a.check_len(y.len())?;
        return Ok(y.to_vec());
    }
    target.check_len(y.len())?;
    let t = fitted.transform(y, a)?;
    fitted.inverse_transform(&t, target)
}

/// The structural model built from a fitted family: a latent shock recovered
/// from `(Y, A)` and an outcome map from `(a, shock)`.
pub fn structural_predict(fitted: &RuleFamily, y: &[f64], a: &Bundle, target: &Bundle) -> Result<Vec<f64>> {
    match &fitted.kind {
        RuleKind::PartiallyLinear { .. } => {
            let h = fitted.index_h()?;
            let map = match &h {
                HFamily::LogitInverse { alpha, gamma, intercept } => {
                    Some(ShareMap::plain_logit(*alpha, gamma.clone()).with_intercept(*intercept))
                }
                HFamily::MixedLogitInverse { map, .. } => Some(map.clone()),
                _ => None,
            };
            let shares = SharesVector::new(y.to_vec())?;
            match map {
                Some(map) => {
                    let engine = CounterfactualEngine::new(map, InversionConfig::default());
                    Ok(engine.predict(&shares, a, target)?.into_vec())
                }
                None => Ok(HomTriple::new(h, a.clone())?.convert(y, a, target)?.into_vec()),
            }
        }
        RuleKind::Demeaned { f: Transform::LogRatio, mu } => {
            // plain logit with the mean function as the x1 index and no price
            let relabel = |b: &Bundle| -> Result<Bundle> {
                Bundle::new(fitted.mu(mu, b)?, vec![0.0; b.j()], Vec::new())
            };
            let engine = CounterfactualEngine::new(ShareMap::plain_logit(0.0, Vec::new()), InversionConfig::default());
            let shares = SharesVector::new(y.to_vec())?;
            Ok(engine.predict(&shares, &relabel(a)?, &relabel(target)?)?.into_vec())
        }
        RuleKind::Demeaned { f, mu } => {
            let xi: Vec<f64> = f.apply(y)?.iter().zip(fitted.mu(mu, a)?).map(|(u, m)| u - m).collect();
            let index: Vec<f64> = fitted.mu(mu, target)?.iter().zip(&xi).map(|(m, e)| m + e).collect();
            f.invert(&index)
        }
        RuleKind::QuantileRank { cells } => {
            let latent = interpolate(&fitted.knots(cells, a)?.y, &fitted.knots(cells, a)?.u, y[0]);
            let kn = fitted.knots(cells, target)?;
            Ok(vec![interpolate(&kn.u, &kn.y, latent)])
        }
    }
}

pub const PROP32_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Prop32Report {
    pub max_gap: f64,
    pub comparisons: usize,
    pub failures: usize,
    /// For scalar outcomes: predictions keep the order of observed outcomes
    /// among markets sharing a bundle, at every target.
    pub ranks_preserved: Option<bool>,
}

impl Prop32Report {
    pub fn passes(&self) -> bool {
        self.failures == 0 && self.max_gap <= PROP32_TOL && self.ranks_preserved != Some(false)
    }
}

/// Compares [`extrapolate`] with [`structural_predict`] on every market and
/// target.
pub fn check_prop32(fitted: &RuleFamily, data: &[MarketDraw], targets: &[Bundle]) -> Prop32Report {
    let rows: Vec<(f64, usize, Vec<Option<f64>>)> = data
        .par_iter()
        .map(|m| {
            let (mut gap, mut failures) = (0.0_f64, 0);
            let mut scalar = Vec::with_capacity(targets.len());
            for t in targets {
                let y = m.y.as_slice();
                match (extrapolate(fitted, y, &m.a, t), structural_predict(fitted, y, &m.a, t)) {
                    (Ok(u), Ok(v)) => {
                        gap = gap.max(max_abs_diff(&u, &v));
                        scalar.push((u.len() == 1).then(|| u[0]));
                    }
                    _ => {
                        failures += 1;
                        scalar.push(None);
                    }
                }
            }
            (gap, failures, scalar)
        })
        .collect();
    let ranks_preserved = (data.first().is_some_and(|m| m.y.len() == 1)).then(|| {
        let mut ok = true;
        for (i, mi) in data.iter().enumerate() {
            for (k, mk) in data.iter().enumerate().skip(i + 1) {
                if mi.a != mk.a || mi.y[0] == mk.y[0] {
                    continue;
                }
                for t in 0..targets.len() {
                    if let (Some(u), Some(v)) = (rows[i].2[t], rows[k].2[t]) {
                        if (mi.y[0] > mk.y[0]) != (u > v) {
                            ok = false;
                        }
                    }
                }
            }
        }
        ok
    });
    Prop32Report {
        max_gap: rows.iter().map(|r| r.0).fold(0.0, f64::max),
        comparisons: data.len() * targets.len(),
        failures: rows.iter().map(|r| r.1).sum(),
        ranks_preserved,
    }
}

pub const PRICE_CCS_TOL: f64 = 1e-8;
pub const X1_ERROR_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct PriceCcsReport {
    /// Largest error of `h⁻¹(h(Y, p, x2), p', x2)` against true `Y(x1, p', x2)`.
    pub price_error: f64,
    /// Largest error of the model's `x1` counterfactuals, per latent type.
    pub x1_error_by_type: Vec<f64>,
    pub comparisons: usize,
    pub failures: usize,
}

impl PriceCcsReport {
    pub fn price_correct(&self) -> bool {
        self.failures == 0 && self.price_error <= PRICE_CCS_TOL
    }
    pub fn x1_wrong(&self) -> bool {
        self.x1_error_by_type.iter().any(|e| *e > X1_ERROR_FLOOR)
    }
}

/// Price counterfactuals (every product priced at each grid level) and `x1`
/// counterfactuals (`x1 + shift`) of `triple`, against the truth.
pub fn price_ccs_check(
    triple: &HomTriple,
    population: &[MarketDraw],
    truth: &PopulationSpec,
    price_grid: &[f64],
    x1_shifts: &[f64],
) -> Result<PriceCcsReport> {
    let maps = truth.type_maps()?;
    let per: Vec<(f64, usize, f64, usize)> = population
        .par_iter()
        .map(|m| {
            let (mut pe, mut xe, mut failures) = (0.0_f64, 0.0_f64, 0);
            let mut run = |target: &Bundle, err: &mut f64| {
                let truth_y = truth.potential_outcome(&maps, m.zeta, &m.xi, target);
                let model_y = triple.convert(m.y.as_slice(), &m.a, target);
                match (truth_y, model_y) {
                    (Ok(t), Ok(p)) => *err = err.max(max_abs_diff(t.as_slice(), p.as_slice())),
                    _ => failures += 1,
                }
            };
            for p in price_grid {
                run(&m.a.with_prices(vec![*p; m.a.j()]), &mut pe);
            }
            for s in x1_shifts {
                run(&m.a.with_x1(m.a.x1.iter().map(|x| x + s).collect()), &mut xe);
            }
            (pe, failures, xe, m.zeta)
        })
        .collect();
    let mut x1_error_by_type = vec![0.0; truth.type_count()];
    for (_, _, xe, z) in &per {
        x1_error_by_type[*z] = f64::max(x1_error_by_type[*z], *xe);
    }
    Ok(PriceCcsReport {
        price_error: per.iter().map(|r| r.0).fold(0.0, f64::max),
        x1_error_by_type,
        comparisons: population.len() * (price_grid.len() + x1_shifts.len()),
        failures: per.iter().map(|r| r.1).sum(),
    })
}

/// Two plain-logit types with a common price coefficient and `x1`
/// coefficients 1 and 2: price counterfactuals are homogeneous, `x1`
/// counterfactuals are not.
pub fn price_ccs_population() -> PopulationSpec {
    use crate::demand::{Characteristic, Integration};
    use crate::population::{CharacteristicLaw, DemandTemplate, InstrumentLaw, PriceLaw, ShockLaw};
    let mut spec = PopulationSpec::fig1_default();
    spec.market_count = 500;
    spec.seed = 20_240_603;
    spec.demand = DemandTemplate {
        kind: ShareMapKind::PlainLogit,
        alpha: 1.0,
        gamma: Vec::new(),
        intercept: 0.0,
        random_on: Vec::<Characteristic>::new(),
        integration: Integration::default(),
    };
    spec.mixing_by_type = Vec::new();
    spec.type_probabilities = vec![0.5, 0.5];
    spec.x1_coef_by_type = vec![1.0, 2.0];
    spec.price_law = PriceLaw::Uniform { lo: 0.5, hi: 3.0 };
    spec.instrument_law = InstrumentLaw::EqualsPrice;
    spec.xi_law = ShockLaw::Normal { mean: 0.0, sd: 1.0 };
    spec.x1_law = CharacteristicLaw::Uniform { lo: -1.0, hi: 1.0 };
    spec
}

/// A plain-logit population on a randomized finite support with balanced
/// assignment; `log(Y_j / Y_0) = μ_j(A) + ξ_j` holds exactly.
pub fn demeaned_population() -> PopulationSpec {
    use crate::demand::{Characteristic, Integration};
    use crate::population::{Assignment, DemandTemplate, InstrumentLaw, PriceLaw, ShockLaw};
    let bundles: Vec<Bundle> = (0..8)
        .map(|k| {
            let k = k as f64;
            Bundle::new(vec![0.25 * k - 1.0, 0.5 - 0.1 * k], vec![0.5 + 0.3 * k, 2.5 - 0.2 * k], Vec::new())
                .expect("static bundle")
        })
        .collect();
    let mut spec = PopulationSpec::fig1_default();
    spec.j = 2;
    spec.market_count = 10_000;
    spec.seed = 20_240_602;
    spec.demand = DemandTemplate {
        kind: ShareMapKind::PlainLogit,
        alpha: 1.0,
        gamma: Vec::new(),
        intercept: 0.0,
        random_on: Vec::<Characteristic>::new(),
        integration: Integration::default(),
    };
    spec.mixing_by_type = Vec::new();
    spec.type_probabilities = vec![1.0];
    spec.price_law = PriceLaw::FiniteSupport { bundles };
    spec.instrument_law = InstrumentLaw::SupportIndex;
    spec.xi_law = ShockLaw::Normal { mean: 0.0, sd: 1.0 };
    spec.assignment = Assignment::Balanced;
    spec
}

/// The cells and indicator instruments matching a finite-support population.
pub fn saturated_design(spec: &PopulationSpec) -> Result<(Vec<Bundle>, InstrumentBasis)> {
    match &spec.price_law {
        crate::population::PriceLaw::FiniteSupport { bundles } | crate::population::PriceLaw::Endogenous { bundles, .. } => {
            Ok((
                bundles.clone(),
                InstrumentBasis::Indicators {
                    values: (0..bundles.len()).map(|k| k as f64).collect(),
                },
            ))
        }
        _ => Err(Error::InvalidConfig("a saturated design needs a finite support".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::sample_population;

    fn demeaned_fit(n: usize) -> (PopulationSpec, Vec<MarketDraw>, RuleFamily) {
        let mut spec = demeaned_population();
        spec.market_count = n;
        let data = sample_population(&spec).unwrap();
        let (cells, basis) = saturated_design(&spec).unwrap();
        let family = RuleFamily::new(RuleKind::Demeaned {
            f: Transform::LogRatio,
            mu: MuBasis::CellIndicators { cells },
        });
        let cfg = GmmConfig { basis, ..GmmConfig::default() };
        let (fitted, report) = solve_orthogonality(&family, &TestFunctionSet::MeanIndependence, &data, &cfg).unwrap();
        assert!(report.unique);
        (spec, data, fitted)
    }

    #[test]
    fn identity_transform_fits_cell_means() {
        let mut spec = demeaned_population();
        spec.market_count = 800;
        spec.assignment = crate::population::Assignment::Iid;
        let data = sample_population(&spec).unwrap();
        let (cells, basis) = saturated_design(&spec).unwrap();
        let family = RuleFamily::new(RuleKind::Demeaned {
            f: Transform::Identity,
            mu: MuBasis::CellIndicators { cells: cells.clone() },
        });
        let cfg = GmmConfig { basis, ..GmmConfig::default() };
        let (fitted, _) = solve_orthogonality(&family, &TestFunctionSet::MeanIndependence, &data, &cfg).unwrap();
        for (k, c) in cells.iter().enumerate() {
            let group: Vec<&MarketDraw> = data.iter().filter(|m| &m.a == c).collect();
            for j in 0..2 {
                let mean = group.iter().map(|m| m.y[j]).sum::<f64>() / group.len() as f64;
                assert!((fitted.theta[k * 2 + j] - mean).abs() < 1e-12);
            }
        }
        // ATE display: Ỹ = y + μ(target) − μ(a)
        let m = &data[0];
        let target = &cells[3];
        let pred = extrapolate(&fitted, m.y.as_slice(), &m.a, target).unwrap();
        let mu_a = fitted.mu(&MuBasis::CellIndicators { cells: cells.clone() }, &m.a).unwrap();
        let mu_t = fitted.mu(&MuBasis::CellIndicators { cells: cells.clone() }, target).unwrap();
        for j in 0..2 {
            assert!((pred[j] - (m.y[j] + mu_t[j] - mu_a[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn demeaned_log_ratio_recovers_counterfactuals() {
        let (spec, data, fitted) = demeaned_fit(2_000);
        let maps = spec.type_maps().unwrap();
        let (cells, _) = saturated_design(&spec).unwrap();
        let mut worst = 0.0_f64;
        for m in data.iter().take(200) {
            for t in &cells {
                let truth = spec.potential_outcome(&maps, m.zeta, &m.xi, t).unwrap();
                let pred = extrapolate(&fitted, m.y.as_slice(), &m.a, t).unwrap();
                worst = worst.max(max_abs_diff(truth.as_slice(), &pred));
            }
        }
        assert!(worst <= 1e-6, "{worst}");
    }

    #[test]
    fn identity_at_realized_treatment_is_exact() {
        let (_, data, fitted) = demeaned_fit(400);
        for m in data.iter().take(20) {
            assert_eq!(extrapolate(&fitted, m.y.as_slice(), &m.a, &m.a).unwrap(), m.y.as_slice());
        }
    }

    #[test]
    fn prop32_for_demeaned_and_partially_linear() {
        let (spec, data, fitted) = demeaned_fit(800);
        let (cells, _) = saturated_design(&spec).unwrap();
        let r = check_prop32(&fitted, &data, &cells);
        assert!(r.passes(), "{r:?}");

        let mut pl_spec = price_ccs_population();
        pl_spec.x1_coef_by_type = vec![1.0, 1.0];
        pl_spec.market_count = 600;
        let pl_data = sample_population(&pl_spec).unwrap();
        let family = RuleFamily::new(RuleKind::PartiallyLinear { h: IndexFamily::Logit { x2_dim: 0 } });
        let (fitted, _) = solve_orthogonality(&family, &TestFunctionSet::MeanIndependence, &pl_data, &GmmConfig::default()).unwrap();
        let grid: Vec<Bundle> = (0..10)
            .map(|k| Bundle::new(vec![0.1 * k as f64 - 0.5], vec![0.5 + 0.25 * k as f64], vec![]).unwrap())
            .collect();
        let r = check_prop32(&fitted, &pl_data, &grid);
        assert!(r.passes(), "{r:?}");
    }

    #[test]
    fn partially_linear_recovers_price_coefficient_under_endogeneity() {
        use crate::population::{InstrumentLaw, PriceLaw};
        let mut alphas = Vec::new();
        for rep in 0..20 {
            let mut spec = price_ccs_population();
            spec.x1_coef_by_type = vec![1.0, 1.0];
            spec.market_count = 5_000;
            spec.seed = 1_000 + rep;
            spec.price_law = PriceLaw::Endogenous {
                bundles: (0..12)
                    .map(|k| Bundle::new(vec![0.0], vec![0.5 + 0.2 * k as f64], vec![]).unwrap())
                    .collect(),
                kappa: 1.0,
                noise_sd: 0.5,
            };
            spec.instrument_law = InstrumentLaw::StandardNormal { dim: 1 };
            let data = sample_population(&spec).unwrap();
            let family = RuleFamily::new(RuleKind::PartiallyLinear { h: IndexFamily::Logit { x2_dim: 0 } });
            let (fitted, _) = solve_orthogonality(&family, &TestFunctionSet::MeanIndependence, &data, &GmmConfig::default()).unwrap();
            alphas.push(fitted.theta[1]);
        }
        let n = alphas.len() as f64;
        let mean = alphas.iter().sum::<f64>() / n;
        let se = (alphas.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!((mean - 1.0).abs() <= 2.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn squared_reparametrization_is_not_unique() {
        let mut spec = price_ccs_population();
        spec.x1_coef_by_type = vec![1.0, 1.0];
        spec.market_count = 400;
        let data = sample_population(&spec).unwrap();
        let family = RuleFamily::new(RuleKind::PartiallyLinear { h: IndexFamily::LogitSquared { x2_dim: 0 } });
        let err = solve_orthogonality(&family, &TestFunctionSet::MeanIndependence, &data, &GmmConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonUnique(_)), "{err:?}");
    }

    #[test]
    fn too_little_data_is_rejected() {
        let (_, data, _) = demeaned_fit(400);
        let (cells, basis) = saturated_design(&demeaned_population()).unwrap();
        let family = RuleFamily::new(RuleKind::Demeaned { f: Transform::LogRatio, mu: MuBasis::CellIndicators { cells } });
        let err = solve_orthogonality(&family, &TestFunctionSet::MeanIndependence, &data[..100], &GmmConfig { basis, ..GmmConfig::default() });
        assert!(matches!(err, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn quantile_family_preserves_ranks_and_passes_prop32() {
        let mut spec = demeaned_population();
        spec.j = 1;
        spec.market_count = 1_200;
        let bundles: Vec<Bundle> = (0..4).map(|k| Bundle::new(vec![0.0], vec![0.5 + 0.5 * k as f64], vec![]).unwrap()).collect();
        spec.price_law = crate::population::PriceLaw::FiniteSupport { bundles: bundles.clone() };
        spec.assignment = crate::population::Assignment::Iid;
        let data = sample_population(&spec).unwrap();
        let family = RuleFamily::new(RuleKind::QuantileRank { cells: Vec::new() });
        let cfg = GmmConfig { basis: InstrumentBasis::Indicators { values: vec![0.0, 1.0, 2.0, 3.0] }, ..GmmConfig::default() };
        let tests = TestFunctionSet::IndicatorGrid { cutpoints: vec![0.25, 0.5, 0.75] };
        let (fitted, report) = solve_orthogonality(&family, &tests, &data, &cfg).unwrap();
        assert!(report.criterion < 1e-4, "{report:?}");
        let r = check_prop32(&fitted, &data, &bundles);
        assert_eq!(r.ranks_preserved, Some(true));
        assert!(r.passes(), "{r:?}");
    }

    #[test]
    fn price_counterfactuals_correct_x1_counterfactuals_wrong() {
        let spec = price_ccs_population();
        let data = sample_population(&spec).unwrap();
        let triple = HomTriple::new(HFamily::logit_inverse(1.0), spec.median_bundle()).unwrap();
        let grid: Vec<f64> = (0..10).map(|k| 0.5 + 0.25 * k as f64).collect();
        let r = price_ccs_check(&triple, &data, &spec, &grid, &[-0.5, 0.5, 1.0]).unwrap();
        assert!(r.price_correct(), "{r:?}");
        assert!(r.x1_wrong(), "{r:?}");
        assert!(r.x1_error_by_type[0] <= 1e-8);

        let mut homogeneous = spec.clone();
        homogeneous.x1_coef_by_type = vec![1.0, 1.0];
        let data = sample_population(&homogeneous).unwrap();
        let r = price_ccs_check(&triple, &data, &homogeneous, &grid, &[-0.5, 0.5, 1.0]).unwrap();
        assert!(r.price_correct() && !r.x1_wrong(), "{r:?}");
        // only the observed price
        let r = price_ccs_check(&triple, &data[..1], &homogeneous, &[data[0].a.p[0]], &[]).unwrap();
        assert_eq!(r.price_error, 0.0);
    }

    #[test]
    fn families_serialize() {
        let family = RuleFamily::new(RuleKind::PartiallyLinear { h: IndexFamily::Logit { x2_dim: 1 } });
        let text = toml::to_string(&family).unwrap();
        assert_eq!(toml::from_str::<RuleFamily>(&text).unwrap(), family);
        let cfg = GmmConfig::default();
        assert_eq!(toml::from_str::<GmmConfig>(&toml::to_string(&cfg).unwrap()).unwrap(), cfg);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn extrapolation_round_trips(
                y in proptest::collection::vec(0.05..0.3_f64, 2),
                theta in proptest::collection::vec(-2.0..2.0_f64, 6),
                t in 0usize..3,
            ) {
                let cells: Vec<Bundle> = (0..3).map(|k| Bundle::new(vec![k as f64, 0.0], vec![1.0, 2.0], vec![]).unwrap()).collect();
                for f in [Transform::LogRatio, Transform::Log, Transform::Logit] {
                    let mut family = RuleFamily::new(RuleKind::Demeaned { f, mu: MuBasis::CellIndicators { cells: cells.clone() } });
                    family.theta = theta.clone();
                    let there = extrapolate(&family, &y, &cells[0], &cells[t]).unwrap();
                    let back = extrapolate(&family, &there, &cells[t], &cells[0]).unwrap();
                    prop_assert!(max_abs_diff(&back, &y) < 1e-12);
                }
            }

            #[test]
            fn rank_transform_is_strictly_monotone(
                mut sample in proptest::collection::vec(0.01..0.99_f64, 5..40),
                u in 0.0..1.0_f64,
                v in 0.0..1.0_f64,
            ) {
                sample.dedup();
                let knots = rank_knots(&mut sample);
                prop_assume!(knots.is_ok());
                let kn = knots.unwrap();
                let (lo, hi) = if u < v { (u, v) } else { (v, u) };
                prop_assume!(hi - lo > 1e-9);
                prop_assert!(interpolate(&kn.y, &kn.u, lo) < interpolate(&kn.y, &kn.u, hi));
                let back = interpolate(&kn.u, &kn.y, interpolate(&kn.y, &kn.u, lo));
                prop_assert!((back - lo).abs() < 1e-12);
            }
        }
    }
}
