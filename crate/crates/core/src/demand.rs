//! Share maps: plain logit and random-coefficient logit.
//!
//! For product `j` and coefficient draw `β` the index is
//!
//! ```text
//! u_j = δ_j + c − α p_j + x2_jᵀγ + Σ_r β_r z_jr(a)
//! ```
//!
//! where `δ = x1 + ξ` and `z_jr` is the characteristic selected by
//! `random_on[r]`. Shares are the `G`-weighted average of logit choice
//! probabilities with an outside good normalised to zero utility.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{composite_standard_normal, tensor_product, tensor_standard_normal};
use crate::scalar::Scalar;
use crate::types::{Bundle, MixingSpec, SharesVector};

pub const DEFAULT_GH_NODES: usize = 32;

/// Characteristic multiplied by a random coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "kebab-case")]
pub enum Characteristic {
    /// `-p_j`, so a positive coefficient is price sensitivity.
    NegPrice,
    /// Column `k` of `x2`.
    X2(usize),
    /// Product dummy `1{j = k}`; a random product effect.
    Dummy(usize),
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Integration {
    /// Tensor Gauss–Hermite on the underlying normal, `nodes` per dimension.
    GaussHermite { nodes: usize },
    /// Composite Gauss–Legendre on the truncated underlying normal,
    /// `panels × nodes` points per dimension.
    CompositeLegendre { panels: usize, nodes: usize },
    MonteCarlo { draws: usize, seed: u64 },
}

impl Default for Integration {
    fn default() -> Self {
        Integration::GaussHermite {
            nodes: DEFAULT_GH_NODES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShareMapKind {
    PlainLogit,
    MixedLogit,
}

/// Declarative description of a share map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShareMapConfig<T = f64> {
    pub kind: ShareMapKind,
    /// Mean price coefficient (enters as `-alpha * p`).
    #[serde(default)]
    pub alpha: T,
    #[serde(default)]
    pub gamma: Vec<T>,
    #[serde(default)]
    pub intercept: T,
    #[serde(default)]
    pub mixing: Option<MixingSpec<T>>,
    #[serde(default)]
    pub random_on: Vec<Characteristic>,
    #[serde(default)]
    pub integration: Integration,
}

#[derive(Debug, Clone, PartialEq)]
struct Node<T> {
    weight: T,
    beta: Vec<T>,
}

/// A share map `σ(δ, a)` with its integration support precomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "ShareMapConfig<T>",
    into = "ShareMapConfig<T>",
    bound(
        serialize = "T: Scalar + Serialize",
        deserialize = "T: Scalar + Deserialize<'de>"
    )
)]
pub struct ShareMap<T: Scalar = f64> {
    config: ShareMapConfig<T>,
    support: Vec<Node<T>>,
}

impl<T: Scalar> TryFrom<ShareMapConfig<T>> for ShareMap<T> {
    type Error = Error;

    fn try_from(config: ShareMapConfig<T>) -> Result<Self> {
        ShareMap::from_config(config)
    }
}

impl<T: Scalar> From<ShareMap<T>> for ShareMapConfig<T> {
    fn from(map: ShareMap<T>) -> Self {
        map.config
    }
}

/// Per-node logit shares.
fn logit_node<T: Scalar>(index: &[T], out: &mut [T]) {
    let m = index.iter().fold(T::zero(), |m, &u| m.max(u));
    let mut denom = (-m).exp();
    for (o, &u) in out.iter_mut().zip(index) {
        *o = (u - m).exp();
        denom = denom + *o;
    }
    let inv = T::one() / denom;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

impl<T: Scalar> ShareMap<T> {
    pub fn plain_logit(alpha: T, gamma: Vec<T>) -> Self {
        Self::from_config(ShareMapConfig {
            kind: ShareMapKind::PlainLogit,
            alpha,
            gamma,
            intercept: T::zero(),
            mixing: None,
            random_on: Vec::new(),
            integration: Integration::default(),
        })
        .expect("plain logit config is always valid")
    }

    pub fn mixed_logit(
        alpha: T,
        gamma: Vec<T>,
        mixing: MixingSpec<T>,
        random_on: Vec<Characteristic>,
        integration: Integration,
    ) -> Result<Self> {
        Self::from_config(ShareMapConfig {
            kind: ShareMapKind::MixedLogit,
            alpha,
            gamma,
            intercept: T::zero(),
            mixing: Some(mixing),
            random_on,
            integration,
        })
    }

    pub fn with_intercept(mut self, intercept: T) -> Self {
        self.config.intercept = intercept;
        self
    }

    pub fn from_config(config: ShareMapConfig<T>) -> Result<Self> {
        let support = match config.kind {
            ShareMapKind::PlainLogit => {
                if config.mixing.is_some() || !config.random_on.is_empty() {
                    return Err(Error::InvalidConfig(
                        "plain logit takes no mixing distribution".into(),
                    ));
                }
                vec![Node {
                    weight: T::one(),
                    beta: Vec::new(),
                }]
            }
            ShareMapKind::MixedLogit => {
                let mixing = config.mixing.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("mixed logit needs a mixing distribution".into())
                })?;
                mixing.validate()?;
                if mixing.dim() != config.random_on.len() {
                    return Err(Error::dim(
                        "random_on characteristics",
                        mixing.dim(),
                        config.random_on.len(),
                    ));
                }
                build_support(mixing, &config.integration)?
            }
        };
        let finite = config.alpha.is_finite()
            && config.intercept.is_finite()
            && config.gamma.iter().all(|g| g.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("non-finite index coefficients".into()));
        }
        Ok(Self { config, support })
    }

    pub fn config(&self) -> &ShareMapConfig<T> {
        &self.config
    }

    pub fn kind(&self) -> ShareMapKind {
        self.config.kind
    }

    pub fn alpha(&self) -> T {
        self.config.alpha
    }

    /// Number of integration nodes (1 for plain logit).
    pub fn support_size(&self) -> usize {
        self.support.len()
    }

    /// Non-random part of the index, `c − α p_j + x2_jᵀγ`.
    pub fn base_index(&self, a: &Bundle<T>, j: usize) -> T {
        let mut g = self.config.intercept - self.config.alpha * a.p[j];
        if !self.config.gamma.is_empty() {
            for (x, c) in a.x2_row(j).iter().zip(&self.config.gamma) {
                g = g + *x * *c;
            }
        }
        g
    }

    fn check(&self, delta: &[T], a: &Bundle<T>) -> Result<()> {
        let j = a.j();
        if delta.len() != j {
            return Err(Error::dim("delta", j, delta.len()));
        }
        if !delta.iter().all(|d| d.is_finite()) {
            return Err(Error::InvalidConfig("delta has non-finite entries".into()));
        }
        a.check_len(j)?;
        if !self.config.gamma.is_empty() && a.x2_dim() != self.config.gamma.len() {
            return Err(Error::dim("x2 columns", self.config.gamma.len(), a.x2_dim()));
        }
        for c in &self.config.random_on {
            match *c {
                Characteristic::X2(k) if k >= a.x2_dim() => {
                    return Err(Error::dim("x2 column for random coefficient", k + 1, a.x2_dim()))
                }
                Characteristic::Dummy(k) if k >= j => {
                    return Err(Error::dim("product dummy", k + 1, j))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn characteristic(&self, c: Characteristic, a: &Bundle<T>, j: usize) -> T {
        match c {
            Characteristic::NegPrice => -a.p[j],
            Characteristic::X2(k) => a.x2_row(j)[k],
            Characteristic::Dummy(k) => {
                if k == j {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Characteristic::Constant => T::one(),
        }
    }

    fn node_index(&self, base: &[T], node: &Node<T>, a: &Bundle<T>, out: &mut [T]) {
        for (j, o) in out.iter_mut().enumerate() {
            let mut u = base[j];
            for (b, c) in node.beta.iter().zip(&self.config.random_on) {
                u = u + *b * self.characteristic(*c, a, j);
            }
            *o = u;
        }
    }

    /// Unvalidated shares; callers decide how to treat boundary values.
    pub fn raw_shares(&self, delta: &[T], a: &Bundle<T>) -> Result<Vec<T>> {
        self.check(delta, a)?;
        let j = a.j();
        let base: Vec<T> = (0..j).map(|k| delta[k] + self.base_index(a, k)).collect();
        let mut acc = vec![T::zero(); j];
        let mut index = vec![T::zero(); j];
        let mut s = vec![T::zero(); j];
        for node in &self.support {
            self.node_index(&base, node, a, &mut index);
            logit_node(&index, &mut s);
            for (t, v) in acc.iter_mut().zip(&s) {
                *t = *t + node.weight * *v;
            }
        }
        if acc.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationFailure(format!(
                "shares not finite at delta {delta:?}"
            )));
        }
        Ok(acc)
    }

    /// Market shares `σ(δ, a)`, validated against the open simplex.
    pub fn shares(&self, delta: &[T], a: &Bundle<T>) -> Result<SharesVector<T>> {
        SharesVector::new(self.raw_shares(delta, a)?)
    }

    /// Shares and `∂σ_j/∂δ_k` (row-major `J × J`) in one pass.
    pub fn shares_and_jacobian(&self, delta: &[T], a: &Bundle<T>) -> Result<(Vec<T>, Vec<T>)> {
        let (s, jac, _) = self.evaluate(delta, a, false)?;
        Ok((s, jac))
    }

    /// `∂σ_j/∂δ_k`, row-major `J × J`.
    pub fn share_jacobian(&self, delta: &[T], a: &Bundle<T>) -> Result<Vec<T>> {
        let (s, jac) = self.shares_and_jacobian(delta, a)?;
        SharesVector::new(s)?;
        Ok(jac)
    }

    /// `∂σ_j/∂p_k`, row-major `J × J`.
    pub fn price_jacobian(&self, delta: &[T], a: &Bundle<T>) -> Result<Vec<T>> {
        let (_, _, dp) = self.evaluate(delta, a, true)?;
        Ok(dp)
    }

    fn evaluate(&self, delta: &[T], a: &Bundle<T>, with_price: bool) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
        self.check(delta, a)?;
        let j = a.j();
        let base: Vec<T> = (0..j).map(|k| delta[k] + self.base_index(a, k)).collect();
        let mut shares = vec![T::zero(); j];
        let mut jac = vec![T::zero(); j * j];
        let mut dprice = vec![T::zero(); if with_price { j * j } else { 0 }];
        let mut index = vec![T::zero(); j];
        let mut s = vec![T::zero(); j];
        for node in &self.support {
            self.node_index(&base, node, a, &mut index);
            logit_node(&index, &mut s);
            // du_k/dp_k at this node
            let mut du_dp = -self.config.alpha;
            for (b, c) in node.beta.iter().zip(&self.config.random_on) {
                if *c == Characteristic::NegPrice {
                    du_dp = du_dp - *b;
                }
            }
            let w = node.weight;
            for r in 0..j {
                shares[r] = shares[r] + w * s[r];
                for c in 0..j {
                    let own = if r == c { s[r] } else { T::zero() };
                    let d = w * (own - s[r] * s[c]);
                    jac[r * j + c] = jac[r * j + c] + d;
                    if with_price {
                        dprice[r * j + c] = dprice[r * j + c] + d * du_dp;
                    }
                }
            }
        }
        if shares.iter().chain(&jac).chain(&dprice).any(|v| !v.is_finite()) {
            return Err(Error::IntegrationFailure(
                "non-finite shares or derivatives".into(),
            ));
        }
        Ok((shares, jac, dprice))
    }
}

fn build_support<T: Scalar>(mixing: &MixingSpec<T>, integration: &Integration) -> Result<Vec<Node<T>>> {
    let standard_points: Vec<(Vec<T>, T)> = match *integration {
        Integration::GaussHermite { nodes } => {
            if nodes == 0 {
                return Err(Error::InvalidConfig("Gauss-Hermite needs nodes >= 1".into()));
            }
            match mixing {
                MixingSpec::Degenerate { .. } | MixingSpec::FiniteMixture { .. } => Vec::new(),
                _ => tensor_standard_normal(nodes, mixing.dim())?
                    .into_iter()
                    .map(|(p, w)| (p.into_iter().map(T::lit).collect(), T::lit(w)))
                    .collect(),
            }
        }
        Integration::CompositeLegendre { panels, nodes } => match mixing {
            MixingSpec::Degenerate { .. } | MixingSpec::FiniteMixture { .. } => Vec::new(),
            _ => tensor_product(&composite_standard_normal(panels, nodes)?, mixing.dim())
                .into_iter()
                .map(|(p, w)| (p.into_iter().map(T::lit).collect(), T::lit(w)))
                .collect(),
        },
        Integration::MonteCarlo { draws, seed } => {
            if draws == 0 {
                return Err(Error::InvalidConfig("Monte Carlo needs draws >= 1".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = T::one() / T::lit(draws as f64);
            (0..draws)
                .map(|_| {
                    let p = (0..mixing.dim())
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            T::lit(z)
                        })
                        .collect();
                    (p, w)
                })
                .collect()
        }
    };
    let nodes = match mixing {
        MixingSpec::Degenerate { beta } => vec![Node {
            weight: T::one(),
            beta: beta.clone(),
        }],
        MixingSpec::Normal { mean, sd } => standard_points
            .into_iter()
            .map(|(z, weight)| Node {
                weight,
                beta: z
                    .iter()
                    .zip(mean.iter().zip(sd))
                    .map(|(z, (m, s))| *m + *s * *z)
                    .collect(),
            })
            .collect(),
        MixingSpec::Lognormal { mu, sigma } => standard_points
            .into_iter()
            .map(|(z, weight)| Node {
                weight,
                beta: z
                    .iter()
                    .zip(mu.iter().zip(sigma))
                    .map(|(z, (m, s))| (*m + *s * *z).exp())
                    .collect(),
            })
            .collect(),
        MixingSpec::FiniteMixture {
            weights,
            components,
        } => {
            let mut out = Vec::new();
            for (k, (w, comp)) in weights.iter().zip(components).enumerate() {
                let integ = match *integration {
                    Integration::MonteCarlo { draws, seed } => Integration::MonteCarlo {
                        draws,
                        seed: seed.wrapping_add(k as u64 + 1),
                    },
                    other => other,
                };
                for node in build_support(comp, &integ)? {
                    out.push(Node {
                        weight: *w * node.weight,
                        beta: node.beta,
                    });
                }
            }
            out
        }
    };
    Ok(nodes)
}
