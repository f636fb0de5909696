//! Shared domain types: share vectors, treatment bundles, mixing laws and
//! simulated market draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Distance from the simplex boundary below which shares are rejected.
pub const SIMPLEX_EPS: f64 = 1e-12;

/// Inside-good market shares on the interior of the simplex.
///
/// Every entry lies in `(eps, 1 - eps)` and the outside share `1 - sum` is at
/// least `eps`. Values at or beyond the boundary are rejected rather than
/// clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct SharesVector<T = f64> {
    values: Vec<T>,
}

impl<T: Scalar> SharesVector<T> {
    /// Validates `values` against the open simplex.
    pub fn new(values: Vec<T>) -> Result<Self> {
        let eps = T::lit(SIMPLEX_EPS);
        if values.is_empty() {
            return Err(Error::SimplexViolation("empty share vector".into()));
        }
        for (j, &v) in values.iter().enumerate() {
            if !(v > eps && v < T::one() - eps) {
                return Err(Error::SimplexViolation(format!(
                    "share {j} = {v:e} outside ({SIMPLEX_EPS:e}, 1 - {SIMPLEX_EPS:e})"
                )));
            }
        }
        let total: T = values.iter().copied().sum();
        if !(total < T::one() - eps) {
            return Err(Error::SimplexViolation(format!(
                "inside shares sum to {total:e}, leaving no outside share"
            )));
        }
        Ok(Self { values })
    }

    /// Validates and additionally checks the product count.
    pub fn with_len(values: Vec<T>, j: usize) -> Result<Self> {
        if values.len() != j {
            return Err(Error::dim("share vector", j, values.len()));
        }
        Self::new(values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    /// Share of the outside good.
    pub fn outside(&self) -> T {
        T::one() - self.values.iter().copied().sum::<T>()
    }

    /// `log(y_j) - log(y_0)`, the plain-logit index implied by the shares.
    pub fn log_ratios(&self) -> Vec<T> {
        let l0 = self.outside().ln();
        self.values.iter().map(|&v| v.ln() - l0).collect()
    }

    /// Inverse of [`Self::log_ratios`].
    pub fn from_log_ratios(t: &[T]) -> Result<Self> {
        let m = t.iter().fold(T::zero(), |m, v| m.max(*v));
        let denom = (-m).exp() + t.iter().map(|v| (*v - m).exp()).sum::<T>();
        Self::new(t.iter().map(|v| (*v - m).exp() / denom).collect())
    }
}

impl<T> std::ops::Index<usize> for SharesVector<T> {
    type Output = T;

    fn index(&self, j: usize) -> &T {
        &self.values[j]
    }
}

/// Validates a raw share vector.
pub fn validate_shares<T: Scalar>(values: &[T]) -> Result<SharesVector<T>> {
    SharesVector::new(values.to_vec())
}

/// A treatment `a = (x1, p, x2)`: special characteristic, price and other
/// characteristics, one entry (or row) per product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bundle<T = f64> {
    pub x1: Vec<T>,
    pub p: Vec<T>,
    #[serde(default)]
    pub x2: Vec<Vec<T>>,
}

impl<T: Scalar> Bundle<T> {
    pub fn new(x1: Vec<T>, p: Vec<T>, x2: Vec<Vec<T>>) -> Result<Self> {
        let b = Self { x1, p, x2 };
        b.validate()?;
        Ok(b)
    }

    /// Bundle with `x1 = 0` and no other characteristics.
    pub fn from_prices(p: Vec<T>) -> Self {
        Self {
            x1: vec![T::zero(); p.len()],
            p,
            x2: Vec::new(),
        }
    }

    /// Number of products.
    pub fn j(&self) -> usize {
        self.p.len()
    }

    /// Width of each `x2` row; zero when the bundle carries no `x2`.
    pub fn x2_dim(&self) -> usize {
        self.x2.first().map_or(0, Vec::len)
    }

    pub fn x2_row(&self, j: usize) -> &[T] {
        self.x2.get(j).map_or(&[], Vec::as_slice)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.p.len();
        if j == 0 {
            return Err(Error::InvalidConfig("bundle has no products".into()));
        }
        if self.x1.len() != j {
            return Err(Error::dim("bundle x1", j, self.x1.len()));
        }
        if !self.x2.is_empty() {
            if self.x2.len() != j {
                return Err(Error::dim("bundle x2 rows", j, self.x2.len()));
            }
            let d = self.x2[0].len();
            if let Some(row) = self.x2.iter().find(|r| r.len() != d) {
                return Err(Error::dim("bundle x2 row width", d, row.len()));
            }
        }
        let finite = self
            .x1
            .iter()
            .chain(&self.p)
            .chain(self.x2.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("bundle has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn check_len(&self, j: usize) -> Result<()> {
        if self.j() != j {
            return Err(Error::dim("bundle products", j, self.j()));
        }
        Ok(())
    }

    pub fn with_x1(&self, x1: Vec<T>) -> Self {
        Self {
            x1,
            p: self.p.clone(),
            x2: self.x2.clone(),
        }
    }

    pub fn with_prices(&self, p: Vec<T>) -> Self {
        Self {
            x1: self.x1.clone(),
            p,
            x2: self.x2.clone(),
        }
    }

    /// Flattened `(x1, p, x2)` feature vector.
    pub fn features(&self) -> Vec<T> {
        let mut f = Vec::with_capacity(self.j() * (2 + self.x2_dim()));
        f.extend_from_slice(&self.x1);
        f.extend_from_slice(&self.p);
        for row in &self.x2 {
            f.extend_from_slice(row);
        }
        f
    }

    pub fn cast<U: Scalar>(&self) -> Bundle<U> {
        let c = |v: &T| U::lit(v.as_f64());
        Bundle {
            x1: self.x1.iter().map(c).collect(),
            p: self.p.iter().map(c).collect(),
            x2: self.x2.iter().map(|r| r.iter().map(c).collect()).collect(),
        }
    }
}

/// Distribution `G` of the random coefficients.
///
/// Normal and lognormal laws are diagonal: one independent component per
/// coefficient dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MixingSpec<T = f64> {
    /// Point mass at `beta`.
    Degenerate { beta: Vec<T> },
    Normal { mean: Vec<T>, sd: Vec<T> },
    /// `beta = exp(mu + sigma * z)` with `z` standard normal.
    Lognormal { mu: Vec<T>, sigma: Vec<T> },
    FiniteMixture {
        weights: Vec<T>,
        components: Vec<MixingSpec<T>>,
    },
}

impl<T: Scalar> MixingSpec<T> {
    pub fn degenerate(beta: Vec<T>) -> Self {
        MixingSpec::Degenerate { beta }
    }

    pub fn lognormal_1d(mu: f64, sigma: f64) -> Self {
        MixingSpec::Lognormal {
            mu: vec![T::lit(mu)],
            sigma: vec![T::lit(sigma)],
        }
    }

    pub fn normal_1d(mean: f64, sd: f64) -> Self {
        MixingSpec::Normal {
            mean: vec![T::lit(mean)],
            sd: vec![T::lit(sd)],
        }
    }

    /// Coefficient dimension.
    pub fn dim(&self) -> usize {
        match self {
            MixingSpec::Degenerate { beta } => beta.len(),
            MixingSpec::Normal { mean, .. } => mean.len(),
            MixingSpec::Lognormal { mu, .. } => mu.len(),
            MixingSpec::FiniteMixture { components, .. } => {
                components.first().map_or(0, MixingSpec::dim)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
        match self {
            MixingSpec::Degenerate { beta } => {
                if beta.is_empty() || !finite(beta) {
                    return Err(Error::InvalidConfig(
                        "degenerate mixing needs finite coefficients".into(),
                    ));
                }
            }
            MixingSpec::Normal { mean: loc, sd: scale }
            | MixingSpec::Lognormal {
                mu: loc,
                sigma: scale,
            } => {
                if loc.is_empty() || loc.len() != scale.len() {
                    return Err(Error::dim("mixing scale", loc.len(), scale.len()));
                }
                if !finite(loc) {
                    return Err(Error::InvalidConfig("non-finite mixing location".into()));
                }
                if scale.iter().any(|s| !(s.is_finite() && *s > T::zero())) {
                    return Err(Error::InvalidConfig(
                        "mixing scale parameters must be strictly positive".into(),
                    ));
                }
            }
            MixingSpec::FiniteMixture {
                weights,
                components,
            } => {
                if weights.is_empty() || weights.len() != components.len() {
                    return Err(Error::dim(
                        "mixture weights",
                        components.len(),
                        weights.len(),
                    ));
                }
                if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
                    return Err(Error::InvalidConfig("negative mixture weight".into()));
                }
                let total: T = weights.iter().copied().sum();
                if (total - T::one()).abs() > T::lit(1e-9) {
                    return Err(Error::InvalidConfig(format!(
                        "mixture weights sum to {total}, not 1"
                    )));
                }
                let d = components[0].dim();
                for c in components {
                    c.validate()?;
                    if c.dim() != d {
                        return Err(Error::dim("mixture component dim", d, c.dim()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One simulated market: latent state `(xi, zeta)` and observables `(y, a, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketDraw<T = f64> {
    pub xi: Vec<T>,
    /// Latent type tag; indexes `PopulationSpec::mixing_by_type`.
    pub zeta: usize,
    pub y: SharesVector<T>,
    pub a: Bundle<T>,
    pub z: Vec<T>,
}
