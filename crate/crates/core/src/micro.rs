//! Within-market variation: profiles `Y(a)[w]` over a grid of micro shifters,
//! identification of `h(·, a)` and `g` from parallel transformed paths, and
//! the instrument step that recovers the level `h(y0, ·)` across treatments.
//!
//! Conventions. `ĥ(y, x) = M (h_raw(y, x) − h_raw(y0, x))` with `M` chosen so
//! that `dĝ/dw(w0) = I`; the completed model is `h(y, x) = ĥ(y, x) + L(x)`
//! with `L(x) = h(y0, x)` located by `E[h(Y(a0)[w0], a0)] = 0`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counterfactual::HFamily;
use crate::demand::{Characteristic, Integration, ShareMap, ShareMapKind};
use crate::error::{Error, Result};
use crate::extrapolation::InstrumentBasis;
use crate::inversion::InversionConfig;
use crate::linalg;
use crate::optimize::{gauss_newton_to, latin_hypercube};
use crate::population::{
    Assignment, DemandTemplate, InstrumentLaw, PopulationSpec, PriceLaw, ShockLaw, SCHEMA_VERSION,
};
use crate::types::{Bundle, MixingSpec, SharesVector};

pub const PARALLEL_TOL: f64 = 1e-8;
pub const THEOREM2_TOL: f64 = 1e-8;
/// Largest admissible condition number of `Π`.
pub const MAX_PI_CONDITION: f64 = 1e8;
/// Normalized candidates closer than this everywhere on the data are one
/// candidate up to a vertical shift.
pub const SHIFT_TOL: f64 = 1e-6;
/// Mean squared normalized path deviation at which the sd fit stops.
const SD_FIT_TOL: f64 = 1e-24;

/// Safeguarded Newton from the first iteration; contraction only as fallback.
fn micro_inversion() -> InversionConfig {
    InversionConfig { newton_switch: 1e3, ..InversionConfig::default() }
}

/// Grid of micro shifters. Always contains `w0` and the central-difference
/// stencil `w0 ± fd_step · e_k`; points are sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WGrid {
    pub points: Vec<Vec<f64>>,
    pub base: usize,
    /// `(plus, minus)` point indices of the stencil along each axis.
    pub stencil: Vec<(usize, usize)>,
    pub fd_step: f64,
}

impl WGrid {
    /// `per_dim` equally spaced values on `[lo, hi]` in every dimension.
    pub fn uniform(per_dim: usize, lo: f64, hi: f64, w0: &[f64], fd_step: f64) -> Result<Self> {
        if per_dim < 2 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidConfig("w grid needs per_dim >= 2 and lo < hi".into()));
        }
        let j = w0.len();
        let axis: Vec<f64> = (0..per_dim)
            .map(|k| lo + (hi - lo) * k as f64 / (per_dim - 1) as f64)
            .collect();
        let total = per_dim.checked_pow(j as u32).filter(|t| *t <= 1_000_000).ok_or_else(|| {
            Error::InvalidConfig(format!("w grid with {per_dim}^{j} points is too large"))
        })?;
        let points = (0..total)
            .map(|mut c| {
                (0..j)
                    .map(|_| {
                        let v = axis[c % per_dim];
                        c /= per_dim;
                        v
                    })
                    .collect()
            })
            .collect();
        Self::with_points(points, w0, fd_step)
    }

    pub fn with_points(mut points: Vec<Vec<f64>>, w0: &[f64], fd_step: f64) -> Result<Self> {
        let j = w0.len();
        if j == 0 {
            return Err(Error::InvalidConfig("w0 must be non-empty".into()));
        }
        if !(fd_step > 0.0 && fd_step.is_finite()) {
            return Err(Error::InvalidConfig("fd_step must be positive".into()));
        }
        if points.iter().any(|p| p.len() != j) {
            return Err(Error::InvalidConfig("w grid points must all have the dimension of w0".into()));
        }
        points.push(w0.to_vec());
        for k in 0..j {
            for s in [fd_step, -fd_step] {
                let mut p = w0.to_vec();
                p[k] += s;
                points.push(p);
            }
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite w grid point".into()));
        }
        let cmp = |a: &Vec<f64>, b: &Vec<f64>| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        };
        points.sort_by(cmp);
        points.dedup();
        let find = |p: &[f64]| points.iter().position(|q| q.as_slice() == p).expect("inserted above");
        let base = find(w0);
        let stencil = (0..j)
            .map(|k| {
                let mut up = w0.to_vec();
                let mut dn = w0.to_vec();
                up[k] += fd_step;
                dn[k] -= fd_step;
                (find(&up), find(&dn))
            })
            .collect();
        Ok(Self { points, base, stencil, fd_step })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[self.base].len()
    }

    pub fn w0(&self) -> &[f64] {
        &self.points[self.base]
    }

    /// Row-major `J × J` central-difference derivative at `w0` of a map with
    /// `values[k]` its value at point `k`.
    pub fn jacobian_at_base(&self, values: &[Vec<f64>]) -> Vec<f64> {
        let j = self.dim();
        let mut jac = vec![0.0; j * j];
        for (k, (up, dn)) in self.stencil.iter().enumerate() {
            for r in 0..j {
                jac[r * j + k] = (values[*up][r] - values[*dn][r]) / (2.0 * self.fd_step);
            }
        }
        jac
    }
}

/// Declarative grid; `w0` defaults to the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WGridSpec {
    pub per_dim: usize,
    pub lo: f64,
    pub hi: f64,
    pub w0: Option<Vec<f64>>,
    pub fd_step: f64,
}

impl Default for WGridSpec {
    fn default() -> Self {
        Self { per_dim: 20, lo: -1.0, hi: 1.0, w0: None, fd_step: 1e-2 }
    }
}

impl WGridSpec {
    pub fn build(&self, j: usize) -> Result<WGrid> {
        let w0 = self.w0.clone().unwrap_or_else(|| vec![0.0; j]);
        if w0.len() != j {
            return Err(Error::dim("w0", j, w0.len()));
        }
        WGrid::uniform(self.per_dim, self.lo, self.hi, &w0, self.fd_step)
    }
}

/// `Y(a)[w] = σ_{Σ(w)}(Π w + x1 + ξ, a)` where `σ` is a mixed logit with price
/// coefficient `alpha` and independent normal random product effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroDgp {
    pub j: usize,
    /// Row-major `J × J`.
    pub pi: Vec<f64>,
    pub alpha: f64,
    /// Standard deviations of the random product effects at `w = 0`.
    pub nu_sd: Vec<f64>,
    /// Effect standard deviations scale by `exp(slope · Σ_k w_k)`; nonzero
    /// values break the index structure.
    #[serde(default)]
    pub sd_slope_in_w: f64,
    #[serde(default)]
    pub integration: Integration,
}

impl MicroDgp {
    /// `J = 1`, `Π = 2`, `α = 1`, effect sd 1.
    pub fn blp_default() -> Self {
        Self {
            j: 1,
            pi: vec![2.0],
            alpha: 1.0,
            nu_sd: vec![1.0],
            sd_slope_in_w: 0.0,
            integration: Integration::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.j;
        if j == 0 {
            return Err(Error::InvalidConfig("j must be at least 1".into()));
        }
        if self.pi.len() != j * j {
            return Err(Error::dim("pi", j * j, self.pi.len()));
        }
        if self.nu_sd.len() != j {
            return Err(Error::dim("nu_sd", j, self.nu_sd.len()));
        }
        if !(self.alpha.is_finite() && self.sd_slope_in_w.is_finite())
            || self.pi.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidConfig("non-finite micro parameters".into()));
        }
        if self.nu_sd.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("nu_sd must be non-negative".into()));
        }
        let sv = DMatrix::from_row_slice(j, j, &self.pi).singular_values();
        let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0_f64), |(l, h), s| (l.min(*s), h.max(*s)));
        if !(lo > 0.0 && hi / lo <= MAX_PI_CONDITION) {
            return Err(Error::InvalidConfig(format!(
                "pi is not full rank (condition number {:e})",
                hi / lo
            )));
        }
        Ok(())
    }

    /// `σ` at shifter `w`; products with zero effect sd get no random effect,
    /// and with none left the map is plain logit.
    pub fn share_map(&self, w: &[f64]) -> Result<ShareMap> {
        let scale = (self.sd_slope_in_w * w.iter().sum::<f64>()).exp();
        let random: Vec<usize> = (0..self.j).filter(|k| self.nu_sd[*k] > 0.0).collect();
        if random.is_empty() {
            return Ok(ShareMap::plain_logit(self.alpha, Vec::new()));
        }
        ShareMap::mixed_logit(
            self.alpha,
            Vec::new(),
            MixingSpec::Normal {
                mean: vec![0.0; random.len()],
                sd: random.iter().map(|k| self.nu_sd[*k] * scale).collect(),
            },
            random.into_iter().map(Characteristic::Dummy).collect(),
            self.integration,
        )
    }

    /// `Π w + x1 + ξ`.
    pub fn index(&self, w: &[f64], xi: &[f64], a: &Bundle) -> Vec<f64> {
        let pw = linalg::mat_vec(&self.pi, w, self.j);
        (0..self.j).map(|k| pw[k] + a.x1[k] + xi[k]).collect()
    }

    pub fn profile(&self, xi: &[f64], a: &Bundle, grid: &WGrid) -> Result<Profile> {
        let shares = grid
            .points
            .iter()
            .map(|w| self.share_map(w)?.shares(&self.index(w, xi, a), a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Profile { shares })
    }

    /// Inverse share map at `w0`, the shape every candidate is judged against.
    pub fn inverse_share_map(&self, w0: &[f64]) -> Result<HFamily> {
        Ok(HFamily::MixedLogitInverse {
            map: self.share_map(w0)?,
            inversion: micro_inversion(),
        })
    }

    /// The structural `h(y, x) = Π⁻¹(σ⁻¹(y, x) − x1)`, normalized so that
    /// `g(w) = w − w0`.
    pub fn true_h(&self, y: &[f64], x: &Bundle, w0: &[f64]) -> Result<Vec<f64>> {
        let delta = self.inverse_share_map(w0)?.eval(y, x)?;
        let rhs: Vec<f64> = delta.iter().zip(&x.x1).map(|(d, x1)| d - x1).collect();
        linalg::solve(&self.pi, &rhs, self.j)
    }
}

/// Shares `Y(a)[w]` at every point of a [`WGrid`], in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub shares: Vec<SharesVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroMarket {
    pub profile: Profile,
    pub a: Bundle,
    pub z: Vec<f64>,
    /// Latent `ξ`, kept for oracles only.
    pub xi: Vec<f64>,
}

/// A micro population. Only the treatment, instrument and shock laws, the
/// characteristic laws, the assignment and the market count of `population`
/// are used; its demand fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroSpec {
    pub dgp: MicroDgp,
    pub population: PopulationSpec,
    #[serde(default)]
    pub grid: WGridSpec,
    /// Baseline share vector `y0`; defaults to `1 / (2J)` per product.
    #[serde(default)]
    pub y0: Option<Vec<f64>>,
}

fn laws_only(j: usize, markets: usize, seed: u64, price_law: PriceLaw, instrument_law: InstrumentLaw) -> PopulationSpec {
    PopulationSpec {
        schema_version: SCHEMA_VERSION,
        j,
        market_count: markets,
        seed,
        demand: DemandTemplate {
            kind: ShareMapKind::PlainLogit,
            alpha: 0.0,
            gamma: Vec::new(),
            intercept: 0.0,
            random_on: Vec::new(),
            integration: Integration::default(),
        },
        mixing_by_type: Vec::new(),
        type_probabilities: vec![1.0],
        x1_coef_by_type: Vec::new(),
        price_law,
        instrument_law,
        xi_law: ShockLaw::Normal { mean: 0.0, sd: 1.0 },
        x1_law: crate::population::CharacteristicLaw::Constant { value: 0.0 },
        x2_dim: 0,
        x2_law: crate::population::CharacteristicLaw::Constant { value: 0.0 },
        assignment: Assignment::Iid,
    }
}

fn price_bundle(p: f64, x1: f64) -> Bundle {
    Bundle::new(vec![x1], vec![p], vec![Vec::new()]).expect("one-product bundle")
}

impl MicroSpec {
    /// 200 markets at the common bundle `p = 1`, `ξ ~ N(0, 1)`.
    pub fn common_treatment_default() -> Self {
        Self {
            dgp: MicroDgp::blp_default(),
            population: laws_only(
                1,
                200,
                20_240_604,
                PriceLaw::FiniteSupport { bundles: vec![price_bundle(1.0, 0.0)] },
                InstrumentLaw::SupportIndex,
            ),
            grid: WGridSpec::default(),
            y0: None,
        }
    }

    /// 200 markets spread evenly over eight bundles (prices 0.5 to 2,
    /// `x1 ∈ {0, 0.5}`) independently of `ξ`; `Z` is the bundle index.
    pub fn randomized_default() -> Self {
        let bundles = [0.5, 1.0, 1.5, 2.0]
            .iter()
            .flat_map(|p| [0.0, 0.5].map(|x1| price_bundle(*p, x1)))
            .collect();
        let mut population = laws_only(
            1,
            200,
            20_240_605,
            PriceLaw::FiniteSupport { bundles },
            InstrumentLaw::SupportIndex,
        );
        population.assignment = Assignment::Balanced;
        Self { population, ..Self::common_treatment_default() }
    }

    /// 200 markets choosing among eight prices (0.5 to 2.25) by a rule that
    /// loads on `ξ` with weight `kappa`; `Z ~ N(0, 1)` shifts the choice.
    pub fn endogenous_default(kappa: f64) -> Self {
        let bundles = (0..8).map(|k| price_bundle(0.5 + 0.25 * k as f64, 0.0)).collect();
        let population = laws_only(
            1,
            200,
            20_240_606,
            PriceLaw::Endogenous { bundles, kappa, noise_sd: 0.5 },
            InstrumentLaw::StandardNormal { dim: 1 },
        );
        Self { population, ..Self::common_treatment_default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.population.validate()?;
        if self.population.j != self.dgp.j {
            return Err(Error::dim("population j", self.dgp.j, self.population.j));
        }
        self.grid.build(self.dgp.j)?;
        self.baseline_shares()?;
        Ok(())
    }

    pub fn baseline_shares(&self) -> Result<Vec<f64>> {
        let j = self.dgp.j;
        let y0 = self.y0.clone().unwrap_or_else(|| vec![0.5 / j as f64; j]);
        Ok(SharesVector::with_len(y0, j)?.into_vec())
    }
}

/// Draws every market's profile over the grid. Market `i` depends only on
/// `(seed, i)`.
pub fn simulate_micro(spec: &MicroSpec) -> Result<(WGrid, Vec<MicroMarket>)> {
    spec.validate()?;
    let grid = spec.grid.build(spec.dgp.j)?;
    let markets = (0..spec.population.market_count)
        .into_par_iter()
        .map(|i| {
            let (xi, _, a, z) = spec.population.draw_latent(i);
            let profile = spec.dgp.profile(&xi, &a, &grid)?;
            Ok(MicroMarket { profile, a, z, xi })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, markets))
}

fn common_treatment(markets: &[MicroMarket]) -> Result<&Bundle> {
    let first = markets
        .first()
        .ok_or_else(|| Error::InsufficientData("no markets".into()))?;
    if markets.iter().any(|m| m.a != first.a) {
        return Err(Error::InvalidConfig("profiles must share a common treatment".into()));
    }
    Ok(&first.a)
}

/// `h(Y_i[w], a) − h(Y_i[w0], a)` indexed `[market][point][product]`.
pub fn transformed_paths(h: &HFamily, markets: &[MicroMarket], grid: &WGrid) -> Result<Vec<Vec<Vec<f64>>>> {
    markets
        .par_iter()
        .map(|m| {
            if m.profile.shares.len() != grid.len() {
                return Err(Error::dim("profile length", grid.len(), m.profile.shares.len()));
            }
            let t = m
                .profile
                .shares
                .iter()
                .map(|y| h.eval(y.as_slice(), &m.a))
                .collect::<Result<Vec<_>>>()?;
            let base = &t[grid.base];
            Ok(t.iter()
                .map(|v| v.iter().zip(base).map(|(x, b)| x - b).collect())
                .collect())
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Coordinatewise median path across markets.
fn median_path(paths: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let (points, j) = (paths[0].len(), paths[0][0].len());
    let mut col = vec![0.0; paths.len()];
    (0..points)
        .map(|w| {
            (0..j)
                .map(|k| {
                    for (c, p) in col.iter_mut().zip(paths) {
                        *c = p[w][k];
                    }
                    median(&mut col)
                })
                .collect()
        })
        .collect()
}

fn max_deviation(paths: &[Vec<Vec<f64>>], center: &[Vec<f64>]) -> f64 {
    paths
        .iter()
        .flat_map(|p| p.iter().zip(center).flat_map(|(v, c)| v.iter().zip(c).map(|(a, b)| (a - b).abs())))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParallelReport {
    /// `max |path_i(w) − median_i path_i(w)|`.
    pub residual: f64,
    pub markets: usize,
    /// A single market makes the restriction vacuous.
    pub vacuous: bool,
}

/// How far the transformed paths of markets at a common treatment are from
/// one another.
pub fn parallel_residual(h: &HFamily, markets: &[MicroMarket], grid: &WGrid) -> Result<ParallelReport> {
    common_treatment(markets)?;
    let paths = transformed_paths(h, markets, grid)?;
    let residual = max_deviation(&paths, &median_path(&paths));
    Ok(ParallelReport { residual, markets: markets.len(), vacuous: markets.len() == 1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTransform {
    pub name: String,
    pub h: HFamily,
}

/// Candidate shapes for `h(·, a)` at one treatment level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MicroFamily {
    Candidates { list: Vec<NamedTransform> },
    /// Inverse mixed-logit maps with normal random product effects of unknown
    /// standard deviations `θ`; `alpha` cancels within a treatment level.
    MixedLogitSd {
        #[serde(default)]
        alpha: f64,
        #[serde(default)]
        integration: Integration,
        #[serde(default = "default_sd_starts")]
        starts: usize,
        #[serde(default = "default_sd_lo")]
        lo: f64,
        #[serde(default = "default_sd_hi")]
        hi: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_sd_starts() -> usize {
    3
}
fn default_sd_lo() -> f64 {
    0.2
}
fn default_sd_hi() -> f64 {
    2.5
}

impl MicroFamily {
    pub fn mixed_logit_sd() -> Self {
        MicroFamily::MixedLogitSd {
            alpha: 0.0,
            integration: Integration::default(),
            starts: default_sd_starts(),
            lo: default_sd_lo(),
            hi: default_sd_hi(),
            seed: 0,
        }
    }
}

fn sd_transform(alpha: f64, integration: Integration, theta: &[f64]) -> Result<HFamily> {
    let j = theta.len();
    let map = ShareMap::mixed_logit(
        alpha,
        Vec::new(),
        MixingSpec::Normal {
            mean: vec![0.0; j],
            sd: theta.iter().map(|t| t.abs().max(1e-6)).collect(),
        },
        (0..j).map(Characteristic::Dummy).collect(),
        integration,
    )?;
    Ok(HFamily::MixedLogitInverse { map, inversion: micro_inversion() })
}

/// `ĥ(y, x) = M (h_raw(y, x) − h_raw(y0, x))` with `dĝ/dw(w0) = I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroCandidate {
    pub name: String,
    pub theta: Vec<f64>,
    pub h_raw: HFamily,
    pub y0: Vec<f64>,
    /// `M`, row-major `J × J`.
    pub scale: Vec<f64>,
    /// `ĝ` at every grid point.
    pub g_hat: Vec<Vec<f64>>,
    /// Parallel residual of the normalized paths.
    pub residual: f64,
}

impl MicroCandidate {
    pub fn eval(&self, y: &[f64], x: &Bundle) -> Result<Vec<f64>> {
        let t = self.h_raw.eval(y, x)?;
        let t0 = self.h_raw.eval(&self.y0, x)?;
        let d: Vec<f64> = t.iter().zip(&t0).map(|(a, b)| a - b).collect();
        Ok(linalg::mat_vec(&self.scale, &d, self.y0.len()))
    }

    pub fn inverse(&self, u: &[f64], x: &Bundle) -> Result<SharesVector> {
        let j = self.y0.len();
        let d = linalg::solve(&self.scale, u, j)?;
        let t0 = self.h_raw.eval(&self.y0, x)?;
        let t: Vec<f64> = d.iter().zip(&t0).map(|(a, b)| a + b).collect();
        self.h_raw.inverse(&t, x)
    }

    fn values(&self, markets: &[MicroMarket]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for m in markets {
            for y in &m.profile.shares {
                out.extend(self.eval(y.as_slice(), &m.a)?);
            }
        }
        Ok(out)
    }
}

fn invert_matrix(m: &[f64], j: usize) -> Option<Vec<f64>> {
    let inv = DMatrix::from_row_slice(j, j, m).try_inverse()?;
    let out: Vec<f64> = inv.transpose().iter().copied().collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}

fn normalize(
    name: String,
    theta: Vec<f64>,
    h_raw: HFamily,
    markets: &[MicroMarket],
    grid: &WGrid,
    y0: &[f64],
) -> Result<MicroCandidate> {
    let j = grid.dim();
    let raw = transformed_paths(&h_raw, markets, grid)?;
    let jac = grid.jacobian_at_base(&median_path(&raw));
    let scale = invert_matrix(&jac, j).ok_or_else(|| {
        Error::NotIdentified(format!("candidate {name} has a singular derivative at w0"))
    })?;
    let paths: Vec<Vec<Vec<f64>>> = raw
        .iter()
        .map(|p| p.iter().map(|v| linalg::mat_vec(&scale, v, j)).collect())
        .collect();
    let g_hat = median_path(&paths);
    let residual = max_deviation(&paths, &g_hat);
    Ok(MicroCandidate { name, theta, h_raw, y0: y0.to_vec(), scale, g_hat, residual })
}

/// Normalized deviations from the mean path, scaled by `√(count)`.
fn sd_residuals(
    alpha: f64,
    integration: Integration,
    theta: &[f64],
    markets: &[MicroMarket],
    grid: &WGrid,
) -> Option<Vec<f64>> {
    let j = grid.dim();
    let h = sd_transform(alpha, integration, theta).ok()?;
    let raw = transformed_paths(&h, markets, grid).ok()?;
    let n = raw.len() as f64;
    let mean: Vec<Vec<f64>> = (0..grid.len())
        .map(|w| (0..j).map(|k| raw.iter().map(|p| p[w][k]).sum::<f64>() / n).collect())
        .collect();
    let scale = invert_matrix(&grid.jacobian_at_base(&mean), j)?;
    let norm = ((raw.len() * grid.len() * j) as f64).sqrt();
    let mut r = Vec::with_capacity(raw.len() * grid.len() * j);
    for p in &raw {
        for (v, c) in p.iter().zip(&mean) {
            let d: Vec<f64> = v.iter().zip(c).map(|(a, b)| a - b).collect();
            r.extend(linalg::mat_vec(&scale, &d, j).into_iter().map(|x| x / norm));
        }
    }
    r.iter().all(|v| v.is_finite()).then_some(r)
}

/// Picks the candidate whose normalized paths are most nearly parallel.
/// Fails with `NotIdentified` when another candidate is as parallel (within
/// [`PARALLEL_TOL`]) yet differs by more than a vertical shift.
pub fn identify_h_and_g(
    family: &MicroFamily,
    markets: &[MicroMarket],
    grid: &WGrid,
    y0: &[f64],
) -> Result<MicroCandidate> {
    common_treatment(markets)?;
    if markets.len() < 2 {
        return Err(Error::InsufficientData(
            "parallel paths need at least two markets at the treatment".into(),
        ));
    }
    SharesVector::with_len(y0.to_vec(), grid.dim())?;
    let mut candidates: Vec<MicroCandidate> = match family {
        MicroFamily::Candidates { list } => {
            if list.is_empty() {
                return Err(Error::InvalidConfig("empty candidate list".into()));
            }
            list.iter()
                .filter_map(|c| {
                    match normalize(c.name.clone(), Vec::new(), c.h.clone(), markets, grid, y0) {
                        Err(Error::NotIdentified(_)) => None,
                        other => Some(other),
                    }
                })
                .collect::<Result<_>>()?
        }
        MicroFamily::MixedLogitSd { alpha, integration, starts, lo, hi, seed } => {
            if *starts == 0 || !(0.0 < *lo && lo < hi) {
                return Err(Error::InvalidConfig("sd family needs starts >= 1 and 0 < lo < hi".into()));
            }
            let j = grid.dim();
            latin_hypercube(*starts, j, *lo, *hi, *seed)
                .into_iter()
                .filter_map(|x0| {
                    let fit = gauss_newton_to(
                        |t| sd_residuals(*alpha, *integration, t, markets, grid),
                        None,
                        &x0,
                        100,
                        SD_FIT_TOL,
                    );
                    if !fit.value.is_finite() {
                        return None;
                    }
                    let theta: Vec<f64> = fit.x.iter().map(|t| t.abs()).collect();
                    let h = match sd_transform(*alpha, *integration, &theta) {
                        Ok(h) => h,
                        Err(e) => return Some(Err(e)),
                    };
                    match normalize("mixed-logit-sd".into(), theta, h, markets, grid, y0) {
                        Err(Error::NotIdentified(_)) => None,
                        other => Some(other),
                    }
                })
                .collect::<Result<_>>()?
        }
    };
    let best = candidates
        .iter()
        .enumerate()
        .min_by(|(i, a), (k, b)| a.residual.total_cmp(&b.residual).then(i.cmp(k)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::NotIdentified("every candidate is flat at w0".into()))?;
    let best_values = candidates[best].values(markets)?;
    for (i, c) in candidates.iter().enumerate() {
        if i == best || c.residual > candidates[best].residual + PARALLEL_TOL {
            continue;
        }
        let gap = c
            .values(markets)?
            .iter()
            .zip(&best_values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if gap > SHIFT_TOL {
            return Err(Error::NotIdentified(format!(
                "candidates {} and {} are equally parallel but differ by {gap:e} beyond a shift",
                candidates[best].name, c.name
            )));
        }
    }
    Ok(candidates.swap_remove(best))
}

/// One identified treatment level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCandidate {
    pub a: Bundle,
    pub markets: usize,
    pub candidate: MicroCandidate,
}

/// Runs [`identify_h_and_g`] separately at every treatment level observed
/// in at least two markets, in order of first appearance.
pub fn identify_cells(
    family: &MicroFamily,
    markets: &[MicroMarket],
    grid: &WGrid,
    y0: &[f64],
) -> Result<Vec<CellCandidate>> {
    let mut levels: Vec<Bundle> = Vec::new();
    for m in markets {
        if !levels.contains(&m.a) {
            levels.push(m.a.clone());
        }
    }
    let mut cells = Vec::new();
    for a in levels {
        let group: Vec<MicroMarket> = markets.iter().filter(|m| m.a == a).cloned().collect();
        if group.len() < 2 {
            continue;
        }
        let candidate = identify_h_and_g(family, &group, grid, y0)?;
        cells.push(CellCandidate { a, markets: group.len(), candidate });
    }
    if cells.is_empty() {
        return Err(Error::InsufficientData("no treatment level has two markets".into()));
    }
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "kebab-case")]
pub enum LevelFeature {
    Price,
    X1,
    X2(usize),
}

/// Family for the level `L(x) = h(y0, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LevelFamily {
    /// `L_j(x) = c_j`.
    Constant,
    /// `L_j(x) = c_j + Σ_k β_k f_k(x, j)` with own-product features.
    Linear { features: Vec<LevelFeature> },
    /// A free level vector per listed treatment.
    Grid { cells: Vec<Bundle> },
}

impl LevelFamily {
    pub fn dim(&self, j: usize) -> usize {
        match self {
            LevelFamily::Constant => j,
            LevelFamily::Linear { features } => j + features.len(),
            LevelFamily::Grid { cells } => j * cells.len(),
        }
    }

    /// Row of the design for product `k` at `x`: `L_k(x) = row · θ`.
    fn design_row(&self, x: &Bundle, k: usize) -> Result<Vec<f64>> {
        let j = x.j();
        let mut row = vec![0.0; self.dim(j)];
        match self {
            LevelFamily::Constant => row[k] = 1.0,
            LevelFamily::Linear { features } => {
                row[k] = 1.0;
                for (f, r) in features.iter().zip(&mut row[j..]) {
                    *r = match f {
                        LevelFeature::Price => x.p[k],
                        LevelFeature::X1 => x.x1[k],
                        LevelFeature::X2(c) => *x.x2_row(k).get(*c).ok_or_else(|| {
                            Error::InvalidConfig(format!("x2 column {c} out of range"))
                        })?,
                    };
                }
            }
            LevelFamily::Grid { cells } => {
                let c = cells.iter().position(|b| b == x).ok_or_else(|| {
                    Error::UnknownTreatment(format!("{x:?} is not a level-grid cell"))
                })?;
                row[c * j + k] = 1.0;
            }
        }
        Ok(row)
    }

    pub fn level(&self, theta: &[f64], x: &Bundle) -> Result<Vec<f64>> {
        (0..x.j())
            .map(|k| Ok(self.design_row(x, k)?.iter().zip(theta).map(|(a, b)| a * b).sum()))
            .collect()
    }
}

/// `h(y, x) = ĥ_x(y) + L(x)` with the cell candidates and the fitted level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedMicroModel {
    pub cells: Vec<CellCandidate>,
    pub level: LevelFamily,
    pub theta: Vec<f64>,
    /// Sample moments `E_n[(L(X) − Q) ⊗ b(Z)]` at `θ`.
    pub moments: Vec<f64>,
    /// `n · mᵀ W m` with `W = (E_n[b bᵀ])⁺`.
    pub criterion: f64,
    pub observations: usize,
    /// Smallest over largest singular value of `E_n[b ⊗ D]`.
    pub rank_ratio: f64,
}

impl CompletedMicroModel {
    /// The cell candidate for `x`, or the first cell's shape evaluated at
    /// `x` when `x` was not observed.
    pub fn candidate(&self, x: &Bundle) -> &MicroCandidate {
        self.cells
            .iter()
            .find(|c| &c.a == x)
            .map_or(&self.cells[0].candidate, |c| &c.candidate)
    }

    /// Price coefficient implied by a one-product level linear in price:
    /// `h(y0, x) = Π⁻¹(σ⁻¹(y0, x) − x1)` with `σ⁻¹` moving one for one with
    /// `α p`, so `α = β_price / M`.
    pub fn price_coefficient(&self) -> Option<f64> {
        let LevelFamily::Linear { features } = &self.level else {
            return None;
        };
        let scale = &self.cells[0].candidate.scale;
        if scale.len() != 1 {
            return None;
        }
        let k = features.iter().position(|f| *f == LevelFeature::Price)?;
        Some(self.theta[1 + k] / scale[0])
    }

    pub fn level_at(&self, x: &Bundle) -> Result<Vec<f64>> {
        self.level.level(&self.theta, x)
    }

    pub fn h(&self, y: &[f64], x: &Bundle) -> Result<Vec<f64>> {
        let u = self.candidate(x).eval(y, x)?;
        let l = self.level_at(x)?;
        Ok(u.iter().zip(&l).map(|(a, b)| a + b).collect())
    }

    /// `Y(target)[w] = h(·, target)⁻¹(h(Y(a)[w], a))` at every grid point.
    pub fn predict_profile(&self, profile: &Profile, a: &Bundle, target: &Bundle) -> Result<Profile> {
        let l = self.level_at(target)?;
        let cand = self.candidate(target);
        let shares = profile
            .shares
            .iter()
            .map(|y| {
                let t = self.h(y.as_slice(), a)?;
                let u: Vec<f64> = t.iter().zip(&l).map(|(a, b)| a - b).collect();
                cand.inverse(&u, target)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Profile { shares })
    }
}

/// Fits `L` from `E[L(X) − Q(Y, w, X) | Z] = 0` where
/// `Q = ĝ(w) − ĥ_X(Y[w])` at the grid point `w_index`, by two-stage least
/// squares on the moments `(L(X) − Q) ⊗ b(Z)`. Markets at levels without a
/// cell candidate are dropped.
pub fn instrument_step(
    cells: &[CellCandidate],
    markets: &[MicroMarket],
    grid: &WGrid,
    w_index: usize,
    level: &LevelFamily,
    basis: &InstrumentBasis,
) -> Result<CompletedMicroModel> {
    if w_index >= grid.len() {
        return Err(Error::InvalidConfig(format!("w index {w_index} outside the grid")));
    }
    if cells.is_empty() {
        return Err(Error::InsufficientData("no identified treatment levels".into()));
    }
    let j = grid.dim();
    let used: Vec<(&MicroMarket, &CellCandidate)> = markets
        .iter()
        .filter_map(|m| cells.iter().find(|c| c.a == m.a).map(|c| (m, c)))
        .collect();
    let d = level.dim(j);
    if used.len() <= d {
        return Err(Error::InsufficientData(format!(
            "{} usable markets for {d} level parameters",
            used.len()
        )));
    }
    let zs: Vec<&[f64]> = used.iter().map(|(m, _)| m.z.as_slice()).collect();
    let b = basis.rows_for(&zs)?;
    let nb = b[0].len();
    let n = used.len() as f64;
    let (mut g, mut mq, mut s) = (DMatrix::zeros(nb * j, d), DVector::zeros(nb * j), DMatrix::zeros(nb * j, nb * j));
    for ((m, cell), bi) in used.iter().zip(&b) {
        let y = &m.profile.shares[w_index];
        let h = cell.candidate.eval(y.as_slice(), &m.a)?;
        let gw = &cell.candidate.g_hat[w_index];
        for k in 0..j {
            let row = level.design_row(&m.a, k)?;
            let q = gw[k] - h[k];
            for (l, bl) in bi.iter().enumerate() {
                let r = l * j + k;
                for (c, v) in row.iter().enumerate() {
                    g[(r, c)] += bl * v / n;
                }
                mq[r] += bl * q / n;
                for (l2, bl2) in bi.iter().enumerate() {
                    s[(r, l2 * j + k)] += bl * bl2 / n;
                }
            }
        }
    }
    let sv = g.singular_values();
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0_f64), |(l, h), v| (l.min(*v), h.max(*v)));
    let rank_ratio = if d > nb * j || hi == 0.0 { 0.0 } else { lo / hi };
    if rank_ratio <= 1e-10 {
        return Err(Error::NonUnique(format!(
            "level parameters are not pinned down by the instruments (singular value ratio {rank_ratio:e})"
        )));
    }
    let w = s
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::NonUnique(format!("instrument second moments: {e}")))?;
    let gtw = g.transpose() * &w;
    let theta = (&gtw * &g)
        .lu()
        .solve(&(&gtw * &mq))
        .ok_or_else(|| Error::NonUnique("singular two-stage normal equations".into()))?;
    let m = &g * &theta - &mq;
    let criterion = n * (m.transpose() * &w * &m)[(0, 0)];
    Ok(CompletedMicroModel {
        cells: cells.to_vec(),
        level: level.clone(),
        theta: theta.iter().copied().collect(),
        moments: m.iter().copied().collect(),
        criterion,
        observations: used.len(),
        rank_ratio,
    })
}

/// Replicated price-coefficient estimates from the completed model, with a
/// valid instrument and with `Z := A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMonteCarlo {
    pub truth: f64,
    pub valid: Vec<f64>,
    pub control: Vec<f64>,
}

/// Mean and standard error of the mean.
pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

impl LevelMonteCarlo {
    /// `|mean − truth|` in units of the standard error of the mean.
    fn bias_in_se(v: &[f64], truth: f64) -> f64 {
        let (mean, se) = mean_and_se(v);
        (mean - truth).abs() / se
    }

    pub fn valid_bias_in_se(&self) -> f64 {
        Self::bias_in_se(&self.valid, self.truth)
    }

    pub fn control_bias_in_se(&self) -> f64 {
        Self::bias_in_se(&self.control, self.truth)
    }
}

/// Replication `r` uses seed `spec.population.seed + r`. Each replication
/// identifies every treatment level with `family`, then fits a level linear
/// in price twice: with the drawn `Z` and with `Z` replaced by the price.
pub fn endogenous_monte_carlo(
    spec: &MicroSpec,
    family: &MicroFamily,
    basis: &InstrumentBasis,
    reps: usize,
) -> Result<LevelMonteCarlo> {
    if spec.dgp.j != 1 {
        return Err(Error::InvalidConfig("the level Monte Carlo is for one product".into()));
    }
    let level = LevelFamily::Linear { features: vec![LevelFeature::Price] };
    let y0 = spec.baseline_shares()?;
    let mut out = LevelMonteCarlo { truth: spec.dgp.alpha, valid: Vec::new(), control: Vec::new() };
    for r in 0..reps {
        let mut rep = spec.clone();
        rep.population.seed = spec.population.seed.wrapping_add(r as u64);
        let (grid, data) = simulate_micro(&rep)?;
        let cells = identify_cells(family, &data, &grid, &y0)?;
        let fit = |markets: &[MicroMarket]| -> Result<f64> {
            instrument_step(&cells, markets, &grid, grid.base, &level, basis)?
                .price_coefficient()
                .ok_or_else(|| Error::InvalidConfig("level has no price term".into()))
        };
        out.valid.push(fit(&data)?);
        let control: Vec<MicroMarket> = data
            .into_iter()
            .map(|mut m| {
                m.z = m.a.p.clone();
                m
            })
            .collect();
        out.control.push(fit(&control)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    /// `max |Y(a0)[w] − C0(Y(a)[w], a)|` with `C0` built from the index
    /// structure at `w0`.
    pub conversion: f64,
    /// `max |φ(Y(a0)[w]) − φ(Y(a0)[w0]) − (w − w0)|`.
    pub parallel_trends: f64,
    /// `max |h(Y(a)[w], a) − h(Y(a0)[w0], a0) − (w − w0)|`.
    pub homogeneity: f64,
    pub tol: f64,
    pub comparisons: usize,
}

impl Theorem2Report {
    pub fn conversion_passes(&self) -> bool {
        self.conversion <= self.tol
    }
    pub fn parallel_trends_passes(&self) -> bool {
        self.parallel_trends <= self.tol
    }
    pub fn homogeneity_passes(&self) -> bool {
        self.homogeneity <= self.tol
    }
    pub fn passes(&self) -> bool {
        self.conversion_passes() && self.parallel_trends_passes() && self.homogeneity_passes()
    }
}

/// Checks the three equivalent micro restrictions on the true potential
/// profiles of `markets` (by their latent `ξ`) at every treatment in
/// `treatments`, using the index structure implied at `w0`.
pub fn verify_theorem2(
    dgp: &MicroDgp,
    markets: &[MicroMarket],
    grid: &WGrid,
    treatments: &[Bundle],
    a0: &Bundle,
) -> Result<Theorem2Report> {
    dgp.validate()?;
    let w0 = grid.w0().to_vec();
    let sigma0 = dgp.share_map(&w0)?;
    let inv = micro_inversion();
    let h = |y: &SharesVector, x: &Bundle| dgp.true_h(y.as_slice(), x, &w0);
    let per_market = markets
        .par_iter()
        .map(|m| {
            let (mut conv, mut pt, mut hom, mut count) = (0.0_f64, 0.0_f64, 0.0_f64, 0usize);
            let base = dgp.profile(&m.xi, a0, grid)?;
            let h00 = h(&base.shares[grid.base], a0)?;
            let phi0 = h00.clone();
            for (wi, w) in grid.points.iter().enumerate() {
                let drift: Vec<f64> = w.iter().zip(&w0).map(|(a, b)| a - b).collect();
                let phi = h(&base.shares[wi], a0)?;
                for k in 0..dgp.j {
                    pt = pt.max((phi[k] - phi0[k] - drift[k]).abs());
                }
                for a in treatments {
                    let y = dgp.share_map(w)?.shares(&dgp.index(w, &m.xi, a), a)?;
                    let delta = crate::inversion::invert(&sigma0, &y, a, &inv)?;
                    let moved: Vec<f64> = (0..dgp.j).map(|k| delta[k] - a.x1[k] + a0.x1[k]).collect();
                    let c0 = sigma0.shares(&moved, a0)?;
                    conv = conv.max(crate::scalar::max_abs_diff(c0.as_slice(), base.shares[wi].as_slice()));
                    let ha = h(&y, a)?;
                    for k in 0..dgp.j {
                        hom = hom.max((ha[k] - h00[k] - drift[k]).abs());
                    }
                    count += 1;
                }
            }
            Ok((conv, pt, hom, count))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = Theorem2Report {
        conversion: 0.0,
        parallel_trends: 0.0,
        homogeneity: 0.0,
        tol: THEOREM2_TOL,
        comparisons: 0,
    };
    for (c, p, h, n) in per_market {
        report.conversion = report.conversion.max(c);
        report.parallel_trends = report.parallel_trends.max(p);
        report.homogeneity = report.homogeneity.max(h);
        report.comparisons += n;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(spec: &mut MicroSpec, markets: usize) {
        spec.population.market_count = markets;
    }

    fn common(markets: usize) -> (MicroSpec, WGrid, Vec<MicroMarket>) {
        let mut spec = MicroSpec::common_treatment_default();
        small(&mut spec, markets);
        let (grid, data) = simulate_micro(&spec).unwrap();
        (spec, grid, data)
    }

    #[test]
    fn grid_holds_base_and_stencil() {
        let g = WGrid::uniform(20, -1.0, 1.0, &[0.0], 0.01).unwrap();
        assert_eq!(g.len(), 23);
        assert_eq!(g.w0(), &[0.0]);
        assert_eq!(g.points[g.stencil[0].0], vec![0.01]);
        assert_eq!(g.points[g.stencil[0].1], vec![-0.01]);
        assert!(g.points.windows(2).all(|p| p[0][0] < p[1][0]));
        let g2 = WGrid::uniform(3, -1.0, 1.0, &[0.0, 0.0], 0.5).unwrap();
        // 9 tensor points, w0 already present, 4 stencil points
        assert_eq!(g2.len(), 13);
        let lin: Vec<Vec<f64>> = g2.points.iter().map(|w| vec![2.0 * w[0] - w[1], w[1]]).collect();
        assert_eq!(g2.jacobian_at_base(&lin), vec![2.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn singular_pi_is_rejected() {
        let mut dgp = MicroDgp::blp_default();
        dgp.j = 2;
        dgp.pi = vec![1.0, 2.0, 2.0, 4.0];
        dgp.nu_sd = vec![1.0, 1.0];
        assert!(matches!(dgp.validate(), Err(Error::InvalidConfig(_))));
        dgp.pi = vec![1.0, 0.0, 0.0, 1e-9];
        assert!(matches!(dgp.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn true_transform_gives_parallel_paths_and_identity_does_not() {
        let (spec, grid, data) = common(200);
        let truth = spec.dgp.inverse_share_map(grid.w0()).unwrap();
        let good = parallel_residual(&truth, &data, &grid).unwrap();
        assert!(good.residual <= PARALLEL_TOL, "{good:?}");
        let bad = parallel_residual(&HFamily::Identity, &data, &grid).unwrap();
        assert!(bad.residual > 0.05, "{bad:?}");
        let one = parallel_residual(&HFamily::Identity, &data[..1], &grid).unwrap();
        assert!(one.vacuous && one.residual == 0.0);
    }

    #[test]
    fn mixed_treatments_are_rejected() {
        let mut spec = MicroSpec::randomized_default();
        small(&mut spec, 16);
        let (grid, data) = simulate_micro(&spec).unwrap();
        assert!(matches!(
            parallel_residual(&HFamily::Identity, &data, &grid),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn structural_h_differences_are_the_shifter() {
        let (spec, grid, data) = common(20);
        let a = &data[0].a;
        for m in &data {
            let h0 = spec.dgp.true_h(m.profile.shares[grid.base].as_slice(), a, grid.w0()).unwrap();
            for (w, y) in grid.points.iter().zip(&m.profile.shares) {
                let h = spec.dgp.true_h(y.as_slice(), a, grid.w0()).unwrap();
                assert!((h[0] - h0[0] - w[0]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn shifted_copies_of_the_truth_are_one_candidate() {
        let (spec, grid, data) = common(60);
        let y0 = spec.baseline_shares().unwrap();
        let truth = spec.dgp.inverse_share_map(grid.w0()).unwrap();
        let list = [0.0, 1.5, -4.0]
            .iter()
            .map(|c| NamedTransform { name: format!("shift {c}"), h: truth.clone().shifted(vec![*c]) })
            .collect();
        let fit = identify_h_and_g(&MicroFamily::Candidates { list }, &data, &grid, &y0).unwrap();
        assert!(fit.residual <= PARALLEL_TOL);
        // g(w) = w − w0 and M = Π⁻¹
        for (w, g) in grid.points.iter().zip(&fit.g_hat) {
            assert!((g[0] - w[0]).abs() < 1e-8, "{w:?} {g:?}");
        }
        assert!((fit.scale[0] - 0.5).abs() < 1e-8);
        let jac = grid.jacobian_at_base(&fit.g_hat);
        assert!((jac[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn family_without_the_truth_stays_non_parallel() {
        let (spec, grid, data) = common(60);
        let y0 = spec.baseline_shares().unwrap();
        let list = vec![
            NamedTransform { name: "identity".into(), h: HFamily::Identity },
            NamedTransform { name: "logit".into(), h: HFamily::logit_inverse(0.0) },
        ];
        let fit = identify_h_and_g(&MicroFamily::Candidates { list }, &data, &grid, &y0).unwrap();
        assert_eq!(fit.name, "logit");
        assert!(fit.residual > 0.01, "{}", fit.residual);
    }

    #[test]
    fn identical_markets_leave_the_shape_unidentified() {
        let mut spec = MicroSpec::common_treatment_default();
        small(&mut spec, 10);
        spec.population.xi_law = ShockLaw::Degenerate { value: 0.3 };
        let (grid, data) = simulate_micro(&spec).unwrap();
        let y0 = spec.baseline_shares().unwrap();
        let list = vec![
            NamedTransform { name: "truth".into(), h: spec.dgp.inverse_share_map(grid.w0()).unwrap() },
            NamedTransform { name: "logit".into(), h: HFamily::logit_inverse(0.0) },
        ];
        let err = identify_h_and_g(&MicroFamily::Candidates { list }, &data, &grid, &y0).unwrap_err();
        assert!(matches!(err, Error::NotIdentified(_)), "{err}");
        assert!(matches!(
            identify_h_and_g(&MicroFamily::mixed_logit_sd(), &data[..1], &grid, &y0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn effect_sd_is_recovered_from_parallel_paths() {
        let (spec, grid, data) = common(40);
        let y0 = spec.baseline_shares().unwrap();
        let fit = identify_h_and_g(&MicroFamily::mixed_logit_sd(), &data, &grid, &y0).unwrap();
        assert!((fit.theta[0] - 1.0).abs() < 1e-6, "{:?}", fit.theta);
        assert!((fit.scale[0] - 0.5).abs() < 1e-6);
        assert!(fit.residual < 1e-6);
    }

    fn randomized_fit(level: LevelFamily) -> (MicroSpec, WGrid, Vec<MicroMarket>, Result<CompletedMicroModel>) {
        let mut spec = MicroSpec::randomized_default();
        small(&mut spec, 80);
        let (grid, data) = simulate_micro(&spec).unwrap();
        let y0 = spec.baseline_shares().unwrap();
        let truth = spec.dgp.inverse_share_map(grid.w0()).unwrap();
        let family = MicroFamily::Candidates { list: vec![NamedTransform { name: "truth".into(), h: truth }] };
        let cells = identify_cells(&family, &data, &grid, &y0).unwrap();
        let basis = InstrumentBasis::Indicators { values: (0..8).map(f64::from).collect() };
        let model = instrument_step(&cells, &data, &grid, grid.base, &level, &basis);
        (spec, grid, data, model)
    }

    #[test]
    fn randomized_levels_reproduce_counterfactual_profiles() {
        let PriceLaw::FiniteSupport { bundles } = MicroSpec::randomized_default().population.price_law else {
            unreachable!()
        };
        for level in [
            LevelFamily::Grid { cells: bundles.clone() },
            LevelFamily::Linear { features: vec![LevelFeature::Price, LevelFeature::X1] },
        ] {
            let (spec, grid, data, model) = randomized_fit(level);
            let model = model.unwrap();
            for m in data.iter().step_by(7) {
                for target in &bundles {
                    let pred = model.predict_profile(&m.profile, &m.a, target).unwrap();
                    let truth = spec.dgp.profile(&m.xi, target, &grid).unwrap();
                    for (p, t) in pred.shares.iter().zip(&truth.shares) {
                        assert!(crate::scalar::max_abs_diff(p.as_slice(), t.as_slice()) < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn unobserved_treatment_is_predicted_from_the_linear_level() {
        let (spec, grid, data, model) =
            randomized_fit(LevelFamily::Linear { features: vec![LevelFeature::Price, LevelFeature::X1] });
        let model = model.unwrap();
        let target = price_bundle(1.25, 0.25);
        assert!(model.cells.iter().all(|c| c.a != target));
        for m in data.iter().step_by(5) {
            let pred = model.predict_profile(&m.profile, &m.a, &target).unwrap();
            let truth = spec.dgp.profile(&m.xi, &target, &grid).unwrap();
            for (p, t) in pred.shares.iter().zip(&truth.shares) {
                assert!(crate::scalar::max_abs_diff(p.as_slice(), t.as_slice()) < 1e-8);
            }
        }
        assert!((model.price_coefficient().unwrap() - spec.dgp.alpha).abs() < 1e-8);
    }

    #[test]
    fn zero_effect_sd_profiles_are_logistic() {
        let mut spec = MicroSpec::common_treatment_default();
        small(&mut spec, 5);
        spec.dgp.pi = vec![1.0];
        spec.dgp.nu_sd = vec![0.0];
        let (grid, data) = simulate_micro(&spec).unwrap();
        for m in &data {
            for (w, y) in grid.points.iter().zip(&m.profile.shares) {
                let u = w[0] + m.a.x1[0] + m.xi[0] - spec.dgp.alpha * m.a.p[0];
                assert!((y.as_slice()[0] - crate::scalar::logistic(u)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn profiles_coincide_without_shocks_and_resist_node_doubling() {
        let mut spec = MicroSpec::common_treatment_default();
        small(&mut spec, 4);
        spec.population.xi_law = ShockLaw::Degenerate { value: -0.4 };
        let (grid, data) = simulate_micro(&spec).unwrap();
        assert!(data.iter().all(|m| m.profile == data[0].profile));
        let (_, _, varied) = common(4);
        let mut fine = spec.dgp.clone();
        fine.integration = Integration::GaussHermite { nodes: 64 };
        for m in &varied {
            let p = fine.profile(&m.xi, &m.a, &grid).unwrap();
            for (a, b) in p.shares.iter().zip(&m.profile.shares) {
                assert!(crate::scalar::max_abs_diff(a.as_slice(), b.as_slice()) <= 1e-10);
            }
        }
    }

    #[test]
    fn linear_level_slopes_match_the_structure() {
        let (spec, _, _, model) =
            randomized_fit(LevelFamily::Linear { features: vec![LevelFeature::Price, LevelFeature::X1] });
        let model = model.unwrap();
        // h(y0, x) = Π⁻¹(σ⁻¹(y0) + α p − x1)
        let pi = spec.dgp.pi[0];
        assert!((model.theta[1] - spec.dgp.alpha / pi).abs() < 1e-8, "{:?}", model.theta);
        assert!((model.theta[2] + 1.0 / pi).abs() < 1e-8);
    }

    #[test]
    fn constant_features_make_levels_non_unique() {
        let (_, _, _, model) = randomized_fit(LevelFamily::Linear {
            features: vec![LevelFeature::Price, LevelFeature::X2(0)],
        });
        assert!(model.is_err());
        let mut spec = MicroSpec::endogenous_default(1.0);
        small(&mut spec, 80);
        let (grid, data) = simulate_micro(&spec).unwrap();
        let y0 = spec.baseline_shares().unwrap();
        let truth = spec.dgp.inverse_share_map(grid.w0()).unwrap();
        let family = MicroFamily::Candidates { list: vec![NamedTransform { name: "truth".into(), h: truth }] };
        let cells = identify_cells(&family, &data, &grid, &y0).unwrap();
        let level = LevelFamily::Linear { features: vec![LevelFeature::Price, LevelFeature::X1] };
        let err = instrument_step(&cells, &data, &grid, grid.base, &level, &InstrumentBasis::Polynomial { degree: 2 })
            .unwrap_err();
        assert!(matches!(err, Error::NonUnique(_)), "{err}");
    }

    #[test]
    fn constant_level_is_recovered_without_shocks() {
        let mut spec = MicroSpec::common_treatment_default();
        small(&mut spec, 12);
        spec.population.xi_law = ShockLaw::Degenerate { value: 0.0 };
        spec.population.instrument_law = InstrumentLaw::SupportIndex;
        let (grid, data) = simulate_micro(&spec).unwrap();
        let y0 = spec.baseline_shares().unwrap();
        let truth = spec.dgp.inverse_share_map(grid.w0()).unwrap();
        // identical markets: a single candidate is trivially parallel
        let family = MicroFamily::Candidates { list: vec![NamedTransform { name: "truth".into(), h: truth }] };
        let cells = identify_cells(&family, &data, &grid, &y0).unwrap();
        let model = instrument_step(
            &cells,
            &data,
            &grid,
            grid.base,
            &LevelFamily::Constant,
            &InstrumentBasis::Polynomial { degree: 0 },
        )
        .unwrap();
        let c = spec.dgp.true_h(&y0, &data[0].a, grid.w0()).unwrap();
        assert!((model.theta[0] - c[0]).abs() < 1e-8, "{} vs {}", model.theta[0], c[0]);
    }

    #[test]
    fn index_structure_passes_all_three_checks() {
        let (spec, grid, data) = common(15);
        let treatments = [price_bundle(0.5, 0.0), price_bundle(2.0, 0.7)];
        let r = verify_theorem2(&spec.dgp, &data, &grid, &treatments, &data[0].a).unwrap();
        assert!(r.passes(), "{r:?}");
        let mut broken = spec.dgp.clone();
        broken.sd_slope_in_w = 0.8;
        let r = verify_theorem2(&broken, &data, &grid, &treatments, &data[0].a).unwrap();
        assert!(r.parallel_trends > 0.01 && !r.passes(), "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn residual_ignores_vertical_shifts(c in -5.0f64..5.0) {
            let (spec, grid, data) = common(8);
            let truth = spec.dgp.inverse_share_map(grid.w0()).unwrap();
            let logit = HFamily::logit_inverse(0.3);
            for h in [truth, logit] {
                let base = parallel_residual(&h, &data, &grid).unwrap().residual;
                let moved = parallel_residual(&h.clone().shifted(vec![c]), &data, &grid).unwrap().residual;
                prop_assert!((base - moved).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_candidate_inverts(u in -3.0f64..3.0) {
            let (spec, grid, data) = common(6);
            let y0 = spec.baseline_shares().unwrap();
            let fit = normalize("logit".into(), Vec::new(), HFamily::logit_inverse(0.0), &data, &grid, &y0).unwrap();
            let a = &data[0].a;
            let y = fit.inverse(&[u], a).unwrap();
            prop_assert!((fit.eval(y.as_slice(), a).unwrap()[0] - u).abs() < 1e-10);
            prop_assert!(fit.eval(&y0, a).unwrap()[0].abs() < 1e-14);
        }
    }
}
