//! Simulable populations of markets and the seeded sampling contract.
//!
//! Market `i` draws everything from its own ChaCha8 stream: the generator is
//! seeded with `seed` and switched to stream `i`. Under balanced assignment
//! the latent shocks come from the stream of block `i / cells` instead, so
//! every treatment cell sees the same set of latent draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::demand::{Characteristic, Integration, ShareMap, ShareMapConfig, ShareMapKind};
use crate::error::{Error, Result};
use crate::types::{Bundle, MarketDraw, MixingSpec, SharesVector};

const BLOCK_STREAMS: u64 = 1 << 63;

pub const SCHEMA_VERSION: u32 = 1;

/// Common part of every type's share map; the type supplies the mixing law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandTemplate {
    pub kind: ShareMapKind,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub random_on: Vec<Characteristic>,
    #[serde(default)]
    pub integration: Integration,
}

/// Law of the treatment `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriceLaw {
    /// Prices i.i.d. `U(lo, hi)` per product; `x1`, `x2` from their own laws.
    Uniform { lo: f64, hi: f64 },
    /// Uniform over a finite list of complete bundles, independent of `ξ`.
    FiniteSupport { bundles: Vec<Bundle> },
    /// Bundle `k` of the sorted list chosen by the `k`-th normal quantile bin
    /// of `v = z₀ + kappa · mean(ξ) + noise_sd · e`, `e ~ N(0, 1)`.
    Endogenous {
        bundles: Vec<Bundle>,
        kappa: f64,
        noise_sd: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InstrumentLaw {
    /// `Z = p`.
    EqualsPrice,
    /// `Z = [k]`, the index of the drawn bundle in a finite support.
    SupportIndex,
    /// `Z ~ N(0, I_dim)`, independent of everything else.
    StandardNormal { dim: usize },
}

/// Law of the structural shock, i.i.d. across products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShockLaw {
    Normal { mean: f64, sd: f64 },
    Degenerate { value: f64 },
}

/// Law of a scalar characteristic, i.i.d. across products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CharacteristicLaw {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    /// Types and treatments drawn independently per market.
    Iid,
    /// Market `i` gets cell `i mod cells` (type-major, then bundle) and
    /// shares its latent shock with every market of block `i div cells`.
    Balanced,
}

/// A population `F*` of markets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub schema_version: u32,
    pub j: usize,
    pub market_count: usize,
    pub seed: u64,
    pub demand: DemandTemplate,
    /// One mixing law per latent type; empty for plain-logit demand.
    #[serde(default)]
    pub mixing_by_type: Vec<MixingSpec>,
    pub type_probabilities: Vec<f64>,
    /// Coefficient on `x1` in the index, per type; empty means all ones.
    #[serde(default)]
    pub x1_coef_by_type: Vec<f64>,
    pub price_law: PriceLaw,
    pub instrument_law: InstrumentLaw,
    pub xi_law: ShockLaw,
    #[serde(default = "zero_law")]
    pub x1_law: CharacteristicLaw,
    #[serde(default)]
    pub x2_dim: usize,
    #[serde(default = "zero_law")]
    pub x2_law: CharacteristicLaw,
    #[serde(default = "iid")]
    pub assignment: Assignment,
}

fn zero_law() -> CharacteristicLaw {
    CharacteristicLaw::Constant { value: 0.0 }
}

fn iid() -> Assignment {
    Assignment::Iid
}

impl CharacteristicLaw {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            CharacteristicLaw::Constant { value } => value,
            CharacteristicLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            CharacteristicLaw::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            CharacteristicLaw::Constant { value } => value.is_finite(),
            CharacteristicLaw::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            CharacteristicLaw::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid {what} law {self:?}")))
        }
    }
}

impl ShockLaw {
    fn draw(&self, rng: &mut ChaCha8Rng, j: usize) -> Vec<f64> {
        match *self {
            ShockLaw::Normal { mean, sd } => (0..j)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    mean + sd * z
                })
                .collect(),
            ShockLaw::Degenerate { value } => vec![value; j],
        }
    }

    /// Variance of a single component.
    pub fn variance(&self) -> f64 {
        match *self {
            ShockLaw::Normal { sd, .. } => sd * sd,
            ShockLaw::Degenerate { .. } => 0.0,
        }
    }
}

impl PopulationSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn type_count(&self) -> usize {
        self.type_probabilities.len()
    }

    pub fn x1_coef(&self, zeta: usize) -> f64 {
        self.x1_coef_by_type.get(zeta).copied().unwrap_or(1.0)
    }

    fn support(&self) -> Option<&[Bundle]> {
        match &self.price_law {
            PriceLaw::FiniteSupport { bundles } | PriceLaw::Endogenous { bundles, .. } => {
                Some(bundles)
            }
            PriceLaw::Uniform { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.j == 0 {
            return Err(Error::InvalidConfig("j must be at least 1".into()));
        }
        let k = self.type_count();
        if k == 0 {
            return Err(Error::InvalidConfig("at least one type is required".into()));
        }
        if self.type_probabilities.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidConfig("negative type probability".into()));
        }
        let total: f64 = self.type_probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "type_probabilities sum to {total}, not 1"
            )));
        }
        match self.demand.kind {
            ShareMapKind::PlainLogit if !self.mixing_by_type.is_empty() => {
                return Err(Error::InvalidConfig(
                    "plain-logit demand takes no mixing_by_type".into(),
                ))
            }
            ShareMapKind::MixedLogit if self.mixing_by_type.len() != k => {
                return Err(Error::dim("mixing_by_type", k, self.mixing_by_type.len()))
            }
            _ => {}
        }
        if !self.x1_coef_by_type.is_empty() && self.x1_coef_by_type.len() != k {
            return Err(Error::dim("x1_coef_by_type", k, self.x1_coef_by_type.len()));
        }
        match &self.price_law {
            PriceLaw::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::InvalidConfig("uniform price law needs lo <= hi".into()));
                }
            }
            PriceLaw::FiniteSupport { bundles } | PriceLaw::Endogenous { bundles, .. } => {
                if bundles.is_empty() {
                    return Err(Error::InvalidConfig("empty treatment support".into()));
                }
                for b in bundles {
                    b.validate()?;
                    b.check_len(self.j)?;
                    if b.x2_dim() != self.x2_dim {
                        return Err(Error::dim("support bundle x2 width", self.x2_dim, b.x2_dim()));
                    }
                }
            }
        }
        if let PriceLaw::Endogenous { kappa, noise_sd, .. } = &self.price_law {
            if !(kappa.is_finite() && noise_sd.is_finite() && *noise_sd >= 0.0) {
                return Err(Error::InvalidConfig("invalid endogenous selection".into()));
            }
            if !matches!(self.instrument_law, InstrumentLaw::StandardNormal { dim } if dim >= 1) {
                return Err(Error::InvalidConfig(
                    "endogenous assignment needs a standard-normal instrument".into(),
                ));
            }
        }
        if matches!(self.instrument_law, InstrumentLaw::SupportIndex) && self.support().is_none() {
            return Err(Error::InvalidConfig(
                "support-index instruments need a finite treatment support".into(),
            ));
        }
        if self.assignment == Assignment::Balanced
            && !matches!(self.price_law, PriceLaw::FiniteSupport { .. })
        {
            return Err(Error::InvalidConfig(
                "balanced assignment needs a finite-support price law".into(),
            ));
        }
        match self.xi_law {
            ShockLaw::Normal { mean, sd } if !(mean.is_finite() && sd.is_finite() && sd >= 0.0) => {
                return Err(Error::InvalidConfig("invalid shock law".into()))
            }
            ShockLaw::Degenerate { value } if !value.is_finite() => {
                return Err(Error::InvalidConfig("invalid shock law".into()))
            }
            _ => {}
        }
        self.x1_law.validate("x1")?;
        self.x2_law.validate("x2")?;
        self.type_maps()?;
        Ok(())
    }

    /// Share map of each latent type.
    pub fn type_maps(&self) -> Result<Vec<ShareMap>> {
        let d = &self.demand;
        let build = |mixing: Option<MixingSpec>| {
            ShareMap::from_config(ShareMapConfig {
                kind: d.kind,
                alpha: d.alpha,
                gamma: d.gamma.clone(),
                intercept: d.intercept,
                mixing,
                random_on: d.random_on.clone(),
                integration: d.integration,
            })
        };
        match d.kind {
            ShareMapKind::PlainLogit => (0..self.type_count()).map(|_| build(None)).collect(),
            ShareMapKind::MixedLogit => self
                .mixing_by_type
                .iter()
                .map(|m| build(Some(m.clone())))
                .collect(),
        }
    }

    /// Index `δ = b_ζ x1 + ξ` of a market at bundle `a`.
    pub fn index(&self, zeta: usize, xi: &[f64], a: &Bundle) -> Vec<f64> {
        let b = self.x1_coef(zeta);
        a.x1.iter().zip(xi).map(|(x, e)| b * x + e).collect()
    }

    /// True potential outcome `Y(a)` of a market with latent `(ξ, ζ)`.
    pub fn potential_outcome(
        &self,
        maps: &[ShareMap],
        zeta: usize,
        xi: &[f64],
        a: &Bundle,
    ) -> Result<SharesVector> {
        maps[zeta].shares(&self.index(zeta, xi, a), a)
    }

    /// Bundle used as the default baseline: the coordinatewise median of the
    /// support, or the midpoint of the uniform price law.
    pub fn median_bundle(&self) -> Bundle {
        match (&self.price_law, self.support()) {
            (_, Some(bundles)) => {
                let med = |f: &dyn Fn(&Bundle) -> Vec<f64>| -> Vec<f64> {
                    let cols: Vec<Vec<f64>> = bundles.iter().map(f).collect();
                    (0..cols[0].len())
                        .map(|c| {
                            let mut v: Vec<f64> = cols.iter().map(|r| r[c]).collect();
                            v.sort_by(f64::total_cmp);
                            let n = v.len();
                            if n % 2 == 1 {
                                v[n / 2]
                            } else {
                                0.5 * (v[n / 2 - 1] + v[n / 2])
                            }
                        })
                        .collect()
                };
                let x1 = med(&|b: &Bundle| b.x1.clone());
                let p = med(&|b: &Bundle| b.p.clone());
                let flat = med(&|b: &Bundle| b.x2.iter().flatten().copied().collect());
                let x2 = if self.x2_dim == 0 {
                    Vec::new()
                } else {
                    flat.chunks(self.x2_dim).map(<[f64]>::to_vec).collect()
                };
                Bundle { x1, p, x2 }
            }
            (PriceLaw::Uniform { lo, hi }, None) => {
                let centre = |law: &CharacteristicLaw| match *law {
                    CharacteristicLaw::Constant { value } => value,
                    CharacteristicLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
                    CharacteristicLaw::Normal { mean, .. } => mean,
                };
                Bundle {
                    x1: vec![centre(&self.x1_law); self.j],
                    p: vec![0.5 * (lo + hi); self.j],
                    x2: if self.x2_dim == 0 {
                        Vec::new()
                    } else {
                        vec![vec![centre(&self.x2_law); self.x2_dim]; self.j]
                    },
                }
            }
            _ => unreachable!("support() is Some for finite laws"),
        }
    }

    /// Market `i` draws from stream `i`; shared block shocks from
    /// `BLOCK_STREAMS | block`, so the two never overlap.
    fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    fn draw_type(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in self.type_probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.type_count() - 1
    }

    fn uniform_bundle(&self, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Bundle {
        let p = (0..self.j).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
        let x1 = (0..self.j).map(|_| self.x1_law.draw(rng)).collect();
        let x2 = (0..self.j * self.x2_dim)
            .map(|_| self.x2_law.draw(rng))
            .collect::<Vec<_>>();
        Bundle {
            x1,
            p,
            x2: if self.x2_dim == 0 {
                Vec::new()
            } else {
                x2.chunks(self.x2_dim).map(<[f64]>::to_vec).collect()
            },
        }
    }

    /// Latent state and observed treatment/instrument of market `i`.
    pub fn draw_latent(&self, i: usize) -> (Vec<f64>, usize, Bundle, Vec<f64>) {
        let mut rng = self.stream(i as u64);
        let (xi, zeta, support_index) = match self.assignment {
            Assignment::Iid => {
                let zeta = self.draw_type(&mut rng);
                let xi = self.xi_law.draw(&mut rng, self.j);
                (xi, zeta, None)
            }
            Assignment::Balanced => {
                let n_bundles = self.support().map_or(1, <[Bundle]>::len);
                let cells = self.type_count() * n_bundles;
                let cell = i % cells;
                let mut block = self.stream(BLOCK_STREAMS | (i / cells) as u64);
                let xi = self.xi_law.draw(&mut block, self.j);
                (xi, cell / n_bundles, Some(cell % n_bundles))
            }
        };
        let (a, k, z0) = match &self.price_law {
            PriceLaw::Uniform { lo, hi } => (self.uniform_bundle(&mut rng, *lo, *hi), 0, Vec::new()),
            PriceLaw::FiniteSupport { bundles } => {
                let k = support_index.unwrap_or_else(|| rng.random_range(0..bundles.len()));
                (bundles[k].clone(), k, Vec::new())
            }
            PriceLaw::Endogenous {
                bundles,
                kappa,
                noise_sd,
            } => {
                let dim = match self.instrument_law {
                    InstrumentLaw::StandardNormal { dim } => dim,
                    _ => 1,
                };
                let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let e: f64 = StandardNormal.sample(&mut rng);
                let mean_xi = xi.iter().sum::<f64>() / self.j as f64;
                let v = z[0] + kappa * mean_xi + noise_sd * e;
                let sd = (1.0 + kappa * kappa * self.xi_law.variance() / self.j as f64
                    + noise_sd * noise_sd)
                    .sqrt();
                let u = Normal::new(0.0, sd).map_or(0.5, |n| n.cdf(v));
                let k = ((u * bundles.len() as f64) as usize).min(bundles.len() - 1);
                (bundles[k].clone(), k, z)
            }
        };
        let z = match self.instrument_law {
            InstrumentLaw::EqualsPrice => a.p.clone(),
            InstrumentLaw::SupportIndex => vec![k as f64],
            InstrumentLaw::StandardNormal { dim } => {
                if z0.is_empty() {
                    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
                } else {
                    z0
                }
            }
        };
        (xi, zeta, a, z)
    }
}

/// Draws `spec.market_count` markets in parallel. Draw `i` depends only on
/// `(seed, i)`.
pub fn sample_population(spec: &PopulationSpec) -> Result<Vec<MarketDraw>> {
    spec.validate()?;
    let maps = spec.type_maps()?;
    (0..spec.market_count)
        .into_par_iter()
        .map(|i| sample_market(spec, &maps, i))
        .collect()
}

/// Market `i` of the population, given prebuilt type maps.
pub fn sample_market(spec: &PopulationSpec, maps: &[ShareMap], i: usize) -> Result<MarketDraw> {
    let (xi, zeta, a, z) = spec.draw_latent(i);
    let y = spec.potential_outcome(maps, zeta, &xi, &a)?;
    Ok(MarketDraw { xi, zeta, y, a, z })
}

impl PopulationSpec {
    /// The two-type population behind Figure 1: `J = 1`, blue markets with a
    /// Lognormal(0, 0.5²) price coefficient, orange with Lognormal(−0.5, 2²),
    /// equal type probabilities, prices `U(0.5, 3)` and `ξ ~ N(0, 1)`.
    pub fn fig1_default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            j: 1,
            market_count: 2000,
            seed: 20_240_601,
            demand: DemandTemplate {
                kind: ShareMapKind::MixedLogit,
                alpha: 0.0,
                gamma: Vec::new(),
                intercept: 0.0,
                random_on: vec![Characteristic::NegPrice],
                integration: Integration::CompositeLegendre {
                    panels: 32,
                    nodes: 32,
                },
            },
            mixing_by_type: vec![
                MixingSpec::lognormal_1d(0.0, 0.5),
                MixingSpec::lognormal_1d(-0.5, 2.0),
            ],
            type_probabilities: vec![0.5, 0.5],
            x1_coef_by_type: Vec::new(),
            price_law: PriceLaw::Uniform { lo: 0.5, hi: 3.0 },
            instrument_law: InstrumentLaw::EqualsPrice,
            xi_law: ShockLaw::Normal { mean: 0.0, sd: 1.0 },
            x1_law: zero_law(),
            x2_dim: 0,
            x2_law: zero_law(),
            assignment: Assignment::Iid,
        }
    }

    /// A one-type population: the blue market type of [`Self::fig1_default`]
    /// for every market.
    pub fn single_type_default() -> Self {
        let mut spec = Self::fig1_default();
        spec.mixing_by_type.truncate(1);
        spec.type_probabilities = vec![1.0];
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_population() {
        let mut spec = PopulationSpec::fig1_default();
        spec.market_count = 0;
        assert!(sample_population(&spec).unwrap().is_empty());
    }

    #[test]
    fn sampling_is_deterministic_and_order_free() {
        let mut spec = PopulationSpec::fig1_default();
        spec.market_count = 64;
        let a = sample_population(&spec).unwrap();
        let b = sample_population(&spec).unwrap();
        assert_eq!(a, b);
        let maps = spec.type_maps().unwrap();
        let serial: Vec<MarketDraw> = (0..64).rev().map(|i| sample_market(&spec, &maps, i).unwrap()).collect();
        assert!(serial.iter().rev().eq(a.iter()));
        spec.seed += 1;
        assert_ne!(sample_population(&spec).unwrap(), a);
    }

    #[test]
    fn emitted_shares_match_the_type_map() {
        let mut spec = PopulationSpec::fig1_default();
        spec.market_count = 50;
        let maps = spec.type_maps().unwrap();
        for m in sample_population(&spec).unwrap() {
            let s = maps[m.zeta].shares(&m.xi, &m.a).unwrap();
            assert_eq!(s, m.y);
            assert!(m.a.p[0] >= 0.5 && m.a.p[0] < 3.0);
            assert_eq!(m.z, m.a.p);
        }
    }

    #[test]
    fn type_frequencies_within_binomial_interval() {
        let spec = PopulationSpec::fig1_default();
        let draws = sample_population(&spec).unwrap();
        let n = draws.len() as f64;
        let blue = draws.iter().filter(|d| d.zeta == 0).count() as f64;
        // 99.9% normal-approximation interval
        let half = 3.29 * (0.25 / n).sqrt();
        assert!((blue / n - 0.5).abs() < half, "blue share {}", blue / n);
    }

    #[test]
    fn balanced_assignment_repeats_shocks_across_cells() {
        let bundles: Vec<Bundle> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&p| Bundle::from_prices(vec![p]))
            .collect();
        let mut spec = PopulationSpec::single_type_default();
        spec.price_law = PriceLaw::FiniteSupport { bundles };
        spec.instrument_law = InstrumentLaw::SupportIndex;
        spec.assignment = Assignment::Balanced;
        spec.market_count = 12;
        let draws = sample_population(&spec).unwrap();
        for block in draws.chunks(3) {
            assert_eq!(block[0].xi, block[1].xi);
            assert_eq!(block[0].xi, block[2].xi);
            let z: Vec<f64> = block.iter().map(|d| d.z[0]).collect();
            assert_eq!(z, vec![0.0, 1.0, 2.0]);
        }
        assert_ne!(draws[0].xi, draws[3].xi);
    }

    #[test]
    fn endogenous_assignment_correlates_with_shocks() {
        let bundles: Vec<Bundle> = [1.0, 2.0]
            .iter()
            .map(|&p| Bundle::from_prices(vec![p]))
            .collect();
        let mut spec = PopulationSpec::single_type_default();
        spec.price_law = PriceLaw::Endogenous {
            bundles,
            kappa: 2.0,
            noise_sd: 0.5,
        };
        spec.instrument_law = InstrumentLaw::StandardNormal { dim: 1 };
        spec.market_count = 2000;
        let draws = sample_population(&spec).unwrap();
        let mean_xi = |p: f64| {
            let v: Vec<f64> = draws.iter().filter(|d| d.a.p[0] == p).map(|d| d.xi[0]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean_xi(2.0) - mean_xi(1.0) > 0.5);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let spec = PopulationSpec::fig1_default();
        let text = spec.to_toml().unwrap();
        assert!(text.contains("schema_version = 1"));
        assert_eq!(PopulationSpec::from_toml(&text).unwrap(), spec);
        assert!(PopulationSpec::from_toml(&text.replace("schema_version = 1", "schema_version = 9")).is_err());
        assert!(PopulationSpec::from_toml(&format!("bogus = 1\n{text}")).is_err());
        let mut bad = spec.clone();
        bad.type_probabilities = vec![0.5, 0.6];
        assert!(bad.validate().is_err());
        let mut bad = spec.clone();
        bad.mixing_by_type.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn median_bundle_of_support() {
        let bundles: Vec<Bundle> = [3.0, 1.0, 2.0]
            .iter()
            .map(|&p| Bundle::from_prices(vec![p]))
            .collect();
        let mut spec = PopulationSpec::single_type_default();
        spec.price_law = PriceLaw::FiniteSupport { bundles };
        assert_eq!(spec.median_bundle().p, vec![2.0]);
        assert_eq!(PopulationSpec::fig1_default().median_bundle().p, vec![1.75]);
    }
}
