//! Homogeneity diagnostics: the conditional-variance test, opposite-type
//! demand curves through an observed point, and the crossing test.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{Integration, ShareMap};
use crate::error::{Error, Result};
use crate::population::{PopulationSpec, PriceLaw, ShockLaw};
use crate::rootfind::{bisect_increasing, BisectionConfig};
use crate::types::{Bundle, MarketDraw, MixingSpec};

/// Degree of the local polynomial removed inside each bin.
pub const LOCAL_FIT_DEGREE: usize = 3;

/// Default number of bins per 10⁴ markets.
pub const DEFAULT_BINS: usize = 200;

fn logit(v: f64) -> f64 {
    (v / (1.0 - v)).ln()
}

fn log_ratio_coords(y: &[f64]) -> Vec<f64> {
    if y.len() == 1 {
        return vec![logit(y[0])];
    }
    let outside = 1.0 - y.iter().sum::<f64>();
    y.iter().map(|v| (v / outside).ln()).collect()
}

/// Sizes of `bins` equal-count groups of `n` items.
fn equal_counts(n: usize, bins: usize) -> Vec<usize> {
    (0..bins).map(|b| n / bins + usize::from(b < n % bins)).collect()
}

/// Splits `idx` into `bins` cells, halving the largest cell along the
/// coordinate of widest spread at each step.
fn kd_partition(points: &[Vec<f64>], idx: Vec<usize>, bins: usize) -> Vec<Vec<usize>> {
    let mut cells = vec![idx];
    while cells.len() < bins {
        let (pos, _) = cells
            .iter()
            .enumerate()
            .max_by_key(|(k, c)| (c.len(), usize::MAX - k))
            .unwrap();
        let mut cell = cells.swap_remove(pos);
        if cell.len() < 2 {
            cells.push(cell);
            break;
        }
        let dims = points[cell[0]].len();
        let spread = |d: usize| {
            let (lo, hi) = cell.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(points[i][d]), hi.max(points[i][d]))
            });
            hi - lo
        };
        let d = (0..dims)
            .max_by(|a, b| spread(*a).total_cmp(&spread(*b)))
            .unwrap_or(0);
        cell.sort_by(|a, b| points[*a][d].total_cmp(&points[*b][d]).then(a.cmp(b)));
        let right = cell.split_off(cell.len() / 2);
        cells.push(cell);
        cells.push(right);
    }
    cells.sort_by_key(|c| c.first().copied());
    cells
}

/// Monomials of total degree `≤ degree` in `u`.
pub(crate) fn monomials(u: &[f64], degree: usize) -> Vec<f64> {
    let mut out = vec![1.0];
    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(vec![], 1.0)];
    for _ in 0..degree {
        let mut next = Vec::new();
        for (pows, val) in &frontier {
            let start = pows.last().copied().unwrap_or(0);
            for (d, x) in u.iter().enumerate().skip(start) {
                let mut p = pows.clone();
                p.push(d);
                next.push((p, val * x));
            }
        }
        out.extend(next.iter().map(|(_, v)| *v));
        frontier = next;
    }
    out
}

fn from_log_ratio_coords(t: &[f64]) -> Vec<f64> {
    if t.len() == 1 {
        return vec![crate::scalar::logistic(t[0])];
    }
    let m = t.iter().fold(0.0_f64, |m, v| m.max(*v));
    let denom = (-m).exp() + t.iter().map(|v| (v - m).exp()).sum::<f64>();
    t.iter().map(|v| (v - m).exp() / denom).collect()
}

/// Share-scale residual variance (divided by the cell size) of the outcome
/// after a least-squares polynomial fit of its log-ratio coordinates on the
/// standardized conditioning coordinates.
fn local_residual_variance(x: &[&Vec<f64>], y: &[&Vec<f64>]) -> f64 {
    let n = x.len();
    let dims = x[0].len();
    let mut mean = vec![0.0; dims];
    for p in x {
        for (m, v) in mean.iter_mut().zip(p.iter()) {
            *m += v / n as f64;
        }
    }
    let mut scale = vec![0.0; dims];
    for p in x {
        for d in 0..dims {
            scale[d] += (p[d] - mean[d]).powi(2) / n as f64;
        }
    }
    let scale: Vec<f64> = scale.iter().map(|s| if *s > 0.0 { s.sqrt() } else { 1.0 }).collect();
    let mut degree = LOCAL_FIT_DEGREE;
    let terms = |deg: usize| monomials(&vec![0.0; dims], deg).len();
    while degree > 0 && terms(degree) + 1 > n {
        degree -= 1;
    }
    let rows: Vec<Vec<f64>> = x
        .iter()
        .map(|p| {
            let u: Vec<f64> = (0..dims).map(|d| (p[d] - mean[d]) / scale[d]).collect();
            monomials(&u, degree)
        })
        .collect();
    let k = rows[0].len();
    let design = DMatrix::from_fn(n, k, |r, c| rows[r][c]);
    let svd = design.clone().svd(true, true);
    let targets: Vec<Vec<f64>> = y.iter().map(|v| log_ratio_coords(v)).collect();
    let outs = targets[0].len();
    let mut fitted = vec![vec![0.0; outs]; n];
    for c in 0..outs {
        let target = DVector::from_iterator(n, targets.iter().map(|v| v[c]));
        let coef = svd
            .solve(&target, 1e-12 * svd.singular_values.max())
            .unwrap_or_else(|_| DVector::zeros(k));
        let fit = &design * coef;
        for r in 0..n {
            fitted[r][c] = fit[r];
        }
    }
    let mut worst = 0.0_f64;
    let back: Vec<Vec<f64>> = fitted.iter().map(|t| from_log_ratio_coords(t)).collect();
    for c in 0..y[0].len() {
        let ss: f64 = (0..n).map(|r| (y[r][c] - back[r][c]).powi(2)).sum();
        worst = worst.max(ss / n as f64);
    }
    worst
}

/// Largest within-bin residual variance of `y_b` given `y_a`.
///
/// Bins are equal-count groups of `y_a` (sorted for `J = 1`, a k-d partition
/// otherwise). Inside each bin the log-ratio coordinates of `y_b` are fitted
/// by a cubic in those of `y_a`, so a smooth deterministic relation leaves
/// only round-off; the variance is of the share-scale residuals.
pub fn conditional_variance_from_pairs(y_a: &[Vec<f64>], y_b: &[Vec<f64>], bins: usize) -> Result<f64> {
    if y_a.len() != y_b.len() {
        return Err(Error::dim("paired outcomes", y_a.len(), y_b.len()));
    }
    if bins == 0 {
        return Err(Error::InvalidConfig("bins must be positive".into()));
    }
    let n = y_a.len();
    if n < 2 * bins {
        return Err(Error::InsufficientData(format!(
            "{n} markets cannot fill {bins} bins with at least 2 each"
        )));
    }
    let coords: Vec<Vec<f64>> = y_a.iter().map(|y| log_ratio_coords(y)).collect();
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::SimplexViolation("conditioning outcome on the boundary".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let cells = if coords[0].len() == 1 {
        idx.sort_by(|a, b| coords[*a][0].total_cmp(&coords[*b][0]).then(a.cmp(b)));
        let mut cells = Vec::with_capacity(bins);
        let mut rest = idx.as_slice();
        for size in equal_counts(n, bins) {
            let (head, tail) = rest.split_at(size);
            cells.push(head.to_vec());
            rest = tail;
        }
        cells
    } else {
        kd_partition(&coords, idx, bins)
    };
    if let Some(c) = cells.iter().find(|c| c.len() < 2) {
        return Err(Error::InsufficientData(format!("a bin holds {} market(s)", c.len())));
    }
    let worst = cells
        .par_iter()
        .map(|cell| {
            let x: Vec<&Vec<f64>> = cell.iter().map(|i| &coords[*i]).collect();
            let y: Vec<&Vec<f64>> = cell.iter().map(|i| &y_b[*i]).collect();
            local_residual_variance(&x, &y)
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

/// Conditional variance of true `Y(a')` given true `Y(a)` across `population`,
/// with potential outcomes computed from each market's stored `(ξ, ζ)`.
pub fn conditional_variance(
    population: &[MarketDraw],
    truth: &PopulationSpec,
    a: &Bundle,
    a_prime: &Bundle,
    bins: usize,
) -> Result<f64> {
    let maps = truth.type_maps()?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = population
        .par_iter()
        .map(|m| {
            let ya = truth.potential_outcome(&maps, m.zeta, &m.xi, a)?;
            let yb = truth.potential_outcome(&maps, m.zeta, &m.xi, a_prime)?;
            Ok((ya.into_vec(), yb.into_vec()))
        })
        .collect::<Result<_>>()?;
    let (ya, yb): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    conditional_variance_from_pairs(&ya, &yb, bins)
}

/// Settings of the two-type single-product experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fig1Spec {
    pub blue: MixingSpec,
    pub orange: MixingSpec,
    pub type_probabilities: Vec<f64>,
    pub price_law: PriceLaw,
    pub xi_law: ShockLaw,
    pub market_count: usize,
    pub seed: u64,
    pub curve_grid: Vec<f64>,
    pub integration: Integration,
    /// Markets drawn in the figure, taken from the start of the population.
    pub plotted_markets: usize,
    pub root: BisectionConfig,
    /// Price shift used by the variance report.
    pub price_shift: f64,
    pub variance_markets: usize,
    pub variance_bins: usize,
}

impl Default for Fig1Spec {
    fn default() -> Self {
        let base = PopulationSpec::fig1_default();
        Self {
            blue: base.mixing_by_type[0].clone(),
            orange: base.mixing_by_type[1].clone(),
            type_probabilities: base.type_probabilities.clone(),
            price_law: base.price_law.clone(),
            xi_law: base.xi_law.clone(),
            market_count: base.market_count,
            seed: base.seed,
            curve_grid: (0..=60).map(|k| 0.25 + 0.05 * k as f64).collect(),
            integration: base.demand.integration,
            plotted_markets: 12,
            root: BisectionConfig::default(),
            price_shift: 0.5,
            variance_markets: 10_000,
            variance_bins: DEFAULT_BINS,
        }
    }
}

impl Fig1Spec {
    pub fn validate(&self) -> Result<()> {
        for m in [&self.blue, &self.orange] {
            if m.dim() != 1 || !matches!(m, MixingSpec::Lognormal { .. }) {
                return Err(Error::InvalidConfig(
                    "both type laws must be one-dimensional lognormal coefficients".into(),
                ));
            }
        }
        if self.type_probabilities.len() != 2 {
            return Err(Error::InvalidConfig("two type probabilities expected".into()));
        }
        if self.curve_grid.is_empty() || self.curve_grid.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig("curve grid must be non-empty and finite".into()));
        }
        self.population().validate()
    }

    /// The two-type population; type 0 is blue, type 1 orange.
    pub fn population(&self) -> PopulationSpec {
        let mut spec = PopulationSpec::fig1_default();
        spec.mixing_by_type = vec![self.blue.clone(), self.orange.clone()];
        spec.type_probabilities = self.type_probabilities.clone();
        spec.price_law = self.price_law.clone();
        spec.xi_law = self.xi_law.clone();
        spec.market_count = self.market_count;
        spec.seed = self.seed;
        spec.demand.integration = self.integration;
        spec
    }

    /// Population where every market is blue.
    pub fn single_type_population(&self) -> PopulationSpec {
        let mut spec = self.population();
        spec.mixing_by_type.truncate(1);
        spec.type_probabilities = vec![1.0];
        spec
    }

    pub fn type_name(zeta: usize) -> &'static str {
        if zeta == 0 {
            "blue"
        } else {
            "orange"
        }
    }
}

/// Own and opposite-type demand curves through one observed `(P, Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossingCurves {
    pub grid: Vec<f64>,
    pub own: Vec<f64>,
    pub opposite: Vec<f64>,
    pub price: f64,
    pub share: f64,
    pub opposite_xi: f64,
    /// `|opposite curve at P − Y|`.
    pub opposite_residual: f64,
    pub own_slope: f64,
    pub opposite_slope: f64,
}

impl CrossingCurves {
    pub fn slope_gap(&self) -> f64 {
        (self.own_slope - self.opposite_slope).abs()
    }
}

/// Curves for `market` and for a hypothetical market of the other type whose
/// shock is chosen so that both pass through the observed point.
pub fn crossing_curve(spec: &Fig1Spec, maps: &[ShareMap], market: &MarketDraw) -> Result<CrossingCurves> {
    if market.a.j() != 1 || maps.len() != 2 {
        return Err(Error::InvalidConfig("crossing curves need J = 1 and two types".into()));
    }
    let own = &maps[market.zeta];
    let other = &maps[1 - market.zeta];
    let price = market.a.p[0];
    let share = market.y[0];
    let own_xi = market.xi[0] + market.a.x1[0];
    let at = |p: f64| market.a.with_prices(vec![p]);
    let opposite_xi = bisect_increasing(
        |xi: f64| match other.raw_shares(&[xi], &market.a) {
            Ok(s) => s[0] - share,
            Err(_) => f64::NAN,
        },
        &spec.root,
    )?;
    let curve = |map: &ShareMap, xi: f64| -> Result<Vec<f64>> {
        spec.curve_grid.iter().map(|p| Ok(map.raw_shares(&[xi], &at(*p))?[0])).collect()
    };
    let opposite_at_p = other.raw_shares(&[opposite_xi], &market.a)?[0];
    Ok(CrossingCurves {
        grid: spec.curve_grid.clone(),
        own: curve(own, own_xi)?,
        opposite: curve(other, opposite_xi)?,
        price,
        share,
        opposite_xi,
        opposite_residual: (opposite_at_p - share).abs(),
        own_slope: own.price_jacobian(&[own_xi], &market.a)?[0],
        opposite_slope: other.price_jacobian(&[opposite_xi], &market.a)?[0],
    })
}

/// Tolerance below which two curve values count as equal.
pub const CURVE_TOL: f64 = 1e-8;

/// True when two curves on a common grid coincide (sup gap `≤ CURVE_TOL`) or
/// never meet (every gap `> CURVE_TOL` with one sign). A sign change between
/// grid points is a crossing.
pub fn demand_curves_identical_or_disjoint(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::dim("curve", a.len(), b.len()));
    }
    let gaps: Vec<f64> = a.iter().zip(b).map(|(u, v)| u - v).collect();
    if gaps.iter().all(|g| g.abs() <= CURVE_TOL) {
        return Ok(true);
    }
    let above = gaps.iter().all(|g| *g > CURVE_TOL);
    let below = gaps.iter().all(|g| *g < -CURVE_TOL);
    Ok(above || below)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counterfactual::CounterfactualEngine;
    use crate::inversion::InversionConfig;
    use crate::types::SharesVector;
    use crate::population::sample_population;
    use crate::scalar::logistic;

    fn at_price(p: f64) -> Bundle {
        Bundle::new(vec![0.0], vec![p], vec![]).unwrap()
    }

    #[test]
    fn single_market_is_insufficient() {
        let err = conditional_variance_from_pairs(&[vec![0.3]], &[vec![0.2]], 1).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn equal_counts_cover_everything() {
        let c = equal_counts(10_003, 200);
        assert_eq!(c.iter().sum::<usize>(), 10_003);
        assert!(c.iter().all(|s| *s == 50 || *s == 51));
    }

    #[test]
    fn deterministic_relation_has_zero_variance() {
        let ya: Vec<Vec<f64>> = (1..1000).map(|k| vec![k as f64 / 1000.0]).collect();
        let yb: Vec<Vec<f64>> = ya.iter().map(|y| vec![logistic(logit(y[0]) - 0.7)]).collect();
        let v = conditional_variance_from_pairs(&ya, &yb, 20).unwrap();
        assert!(v <= 1e-10, "{v}");
        // independent noise is not removed
        let noisy: Vec<Vec<f64>> = yb.iter().enumerate().map(|(k, y)| vec![y[0] + if k % 2 == 0 { 0.01 } else { -0.01 }]).collect();
        assert!(conditional_variance_from_pairs(&ya, &noisy, 20).unwrap() > 5e-5);
    }

    #[test]
    fn kd_partition_for_two_products() {
        let ya: Vec<Vec<f64>> = (0..800)
            .map(|k| vec![0.05 + 0.3 * ((k * 37 % 800) as f64 / 800.0), 0.05 + 0.3 * ((k * 91 % 800) as f64 / 800.0)])
            .collect();
        // a two-product conversion with a smooth nonlinear twist in log ratios
        let yb: Vec<Vec<f64>> = ya
            .iter()
            .map(|y| {
                let t = log_ratio_coords(y);
                from_log_ratio_coords(&[t[0] - 0.3 + 0.05 * t[1].sin(), 0.9 * t[1] + 0.2])
            })
            .collect();
        let v = conditional_variance_from_pairs(&ya, &yb, 16).unwrap();
        assert!(v <= 1e-10, "{v}");
        let cells = kd_partition(&ya.iter().map(|y| log_ratio_coords(y)).collect::<Vec<_>>(), (0..800).collect(), 16);
        assert_eq!(cells.len(), 16);
        assert_eq!(cells.iter().map(Vec::len).sum::<usize>(), 800);
    }

    #[test]
    fn variance_separates_one_and_two_types() {
        let spec = Fig1Spec { variance_markets: 4000, ..Fig1Spec::default() };
        let (a, b) = (at_price(1.75), at_price(2.25));
        let mut single = spec.single_type_population();
        single.market_count = 4000;
        let pop = sample_population(&single).unwrap();
        let v1 = conditional_variance(&pop, &single, &a, &b, 80).unwrap();
        assert!(v1 <= 1e-10, "{v1}");
        let mut two = spec.population();
        two.market_count = 4000;
        let pop2 = sample_population(&two).unwrap();
        let v2 = conditional_variance(&pop2, &two, &a, &b, 80).unwrap();
        assert!(v2 > 1e-4, "{v2}");
    }

    #[test]
    fn predictions_through_the_engine_have_zero_variance() {
        let spec = Fig1Spec::default();
        let mut two = spec.population();
        two.market_count = 3000;
        let pop = sample_population(&two).unwrap();
        let engine = CounterfactualEngine::new(two.type_maps().unwrap().remove(1), InversionConfig::default());
        let a = at_price(1.75);
        let target = at_price(2.25);
        // observed shares at a common bundle, pushed through the engine
        let ya: Vec<SharesVector> = pop
            .iter()
            .map(|m| two.potential_outcome(&two.type_maps().unwrap(), m.zeta, &m.xi, &a).unwrap())
            .collect();
        let yb: Vec<Vec<f64>> = ya.iter().map(|y| engine.predict(y, &a, &target).unwrap().into_vec()).collect();
        let ya: Vec<Vec<f64>> = ya.into_iter().map(SharesVector::into_vec).collect();
        let v = conditional_variance_from_pairs(&ya, &yb, 60).unwrap();
        assert!(v <= 1e-10, "{v}");
    }

    #[test]
    fn crossing_curves_pass_through_observed_point() {
        let spec = Fig1Spec { market_count: 40, ..Fig1Spec::default() };
        let pop_spec = spec.population();
        let maps = pop_spec.type_maps().unwrap();
        let pop = sample_population(&pop_spec).unwrap();
        let mut gaps = 0;
        for m in &pop {
            let c = crossing_curve(&spec, &maps, m).unwrap();
            let own_at_p = maps[m.zeta].shares(&[m.xi[0]], &m.a).unwrap()[0];
            assert_eq!(own_at_p, m.y[0]);
            assert!(c.opposite_residual <= 1e-8);
            if c.slope_gap() > 1e-3 {
                gaps += 1;
            }
            assert_eq!(demand_curves_identical_or_disjoint(&c.own, &c.own).unwrap(), true);
        }
        assert!(gaps >= 36, "{gaps}");
    }

    #[test]
    fn crossing_test_cases() {
        let grid: Vec<f64> = (0..50).map(|k| 0.5 + 0.05 * k as f64).collect();
        let curve = |xi: f64, alpha: f64| -> Vec<f64> { grid.iter().map(|p| logistic(xi - alpha * p)).collect() };
        assert!(demand_curves_identical_or_disjoint(&curve(0.0, 1.0), &curve(0.0, 1.0)).unwrap());
        assert!(demand_curves_identical_or_disjoint(&curve(0.0, 1.0), &curve(0.5, 1.0)).unwrap());
        // same share at p = 1.5 with different slopes
        assert!(!demand_curves_identical_or_disjoint(&curve(0.0, 1.0), &curve(1.5, 2.0)).unwrap());
    }

    #[test]
    fn unreachable_share_is_reported() {
        let spec = Fig1Spec {
            root: BisectionConfig { max_expansions: 0, ..BisectionConfig::default() },
            ..Fig1Spec::default()
        };
        let maps = spec.population().type_maps().unwrap();
        let market = MarketDraw {
            xi: vec![30.0],
            zeta: 0,
            y: SharesVector::new(vec![1.0 - 1e-9]).unwrap(),
            a: at_price(1.0),
            z: vec![1.0],
        };
        assert!(matches!(crossing_curve(&spec, &maps, &market), Err(Error::RootNotBracketed(_))));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = Fig1Spec::default();
        spec.validate().unwrap();
        let back: Fig1Spec = toml::from_str(&toml::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
