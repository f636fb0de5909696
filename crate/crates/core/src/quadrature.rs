//! Quadrature rules for expectations under a standard normal.
//!
//! Gauss–Hermite nodes are found by Newton iteration on the orthonormal
//! Hermite recurrence (stable to a few hundred nodes). The composite
//! Gauss–Legendre rule covers integrands with a sharp transition, such as a
//! logistic kernel under a wide lognormal coefficient, where Gauss–Hermite
//! converges slowly.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Nodes and weights for `∫ f(x) exp(-x²) dx`, nodes ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig(
                "Gauss-Hermite rule needs at least one node".into(),
            ));
        }
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let m = (n + 1) / 2;
        let nf = n as f64;
        let pim4 = PI.powf(-0.25);
        let mut z = 0.0_f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            let mut converged = false;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::IntegrationFailure(format!(
                    "Gauss-Hermite node {i} of {n} did not converge"
                )));
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[m - 1] = 0.0;
        }
        x.reverse();
        w.reverse();
        Ok(Self {
            nodes: x,
            weights: w,
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `∫ f(x) exp(-x²) dx`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// `(z, weight)` pairs with `Σ weight f(z) ≈ E[f(Z)]`, `Z ~ N(0, 1)`.
    pub fn standard_normal(&self) -> Vec<(f64, f64)> {
        let s2 = 2.0_f64.sqrt();
        let norm = PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| (s2 * x, w / norm))
            .collect()
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, nodes ascending.
pub fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidConfig(
            "Gauss-Legendre rule needs at least one node".into(),
        ));
    }
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..(n + 1) / 2 {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        let mut converged = false;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            dp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / dp;
            if (z - z1).abs() <= 1e-15 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::IntegrationFailure(format!(
                "Gauss-Legendre node {i} of {n} did not converge"
            )));
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    Ok((x, w))
}

/// Half-width of the truncated support used by the composite rule; the
/// discarded normal mass is below `2e-17`.
pub const NORMAL_TRUNCATION: f64 = 8.5;

/// `(z, weight)` pairs for `E[f(Z)]`, `Z ~ N(0, 1)`, from `panels` equal
/// panels on `[-8.5, 8.5]` with `nodes` Gauss–Legendre points each. Weights
/// are renormalised to sum to one.
pub fn composite_standard_normal(panels: usize, nodes: usize) -> Result<Vec<(f64, f64)>> {
    if panels == 0 {
        return Err(Error::InvalidConfig("composite rule needs panels >= 1".into()));
    }
    let (x, w) = gauss_legendre(nodes)?;
    let width = 2.0 * NORMAL_TRUNCATION / panels as f64;
    let norm = (2.0 * PI).sqrt();
    let mut out = Vec::with_capacity(panels * nodes);
    for k in 0..panels {
        let mid = -NORMAL_TRUNCATION + width * (k as f64 + 0.5);
        for (xi, wi) in x.iter().zip(&w) {
            let z = mid + 0.5 * width * xi;
            out.push((z, 0.5 * width * wi * (-0.5 * z * z).exp() / norm));
        }
    }
    let total: f64 = out.iter().map(|(_, w)| w).sum();
    for (_, w) in &mut out {
        *w /= total;
    }
    Ok(out)
}

/// Tensor-product rule for a `dim`-variate standard normal with independent
/// components. Returns `(point, weight)` pairs in lexicographic node order.
pub fn tensor_standard_normal(n: usize, dim: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    Ok(tensor_product(&GaussHermite::new(n)?.standard_normal(), dim))
}

/// Tensor power of a one-dimensional `(point, weight)` rule.
pub fn tensor_product(rule: &[(f64, f64)], dim: usize) -> Vec<(Vec<f64>, f64)> {
    let mut out: Vec<(Vec<f64>, f64)> = vec![(Vec::with_capacity(dim), 1.0)];
    for _ in 0..dim {
        let mut next = Vec::with_capacity(out.len() * rule.len());
        for (point, weight) in &out {
            for &(z, w) in rule {
                let mut p = point.clone();
                p.push(z);
                next.push((p, weight * w));
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_factorial_odd(k: u32) -> f64 {
        (1..=k).step_by(2).map(f64::from).product()
    }

    #[test]
    fn zero_nodes_rejected() {
        assert!(GaussHermite::new(0).is_err());
    }

    #[test]
    fn single_node_rule() {
        let r = GaussHermite::new(1).unwrap();
        assert_eq!(r.nodes(), &[0.0]);
        assert!((r.weights()[0] - PI.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn exact_for_normal_moments_up_to_degree_2n_minus_1() {
        for n in [2usize, 5, 10, 32, 64] {
            let rule = GaussHermite::new(n).unwrap().standard_normal();
            for k in 0..(2 * n).min(24) as u32 {
                let approx: f64 = rule.iter().map(|(z, w)| w * z.powi(k as i32)).sum();
                let exact = if k % 2 == 1 {
                    0.0
                } else if k == 0 {
                    1.0
                } else {
                    double_factorial_odd(k - 1)
                };
                // odd moments cancel terms of size ~ k!!
                let tol = 1e-12 * double_factorial_odd(k.max(1)).max(1.0);
                assert!(
                    (approx - exact).abs() < tol,
                    "n={n} k={k}: {approx} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn nodes_ascending_and_symmetric() {
        let r = GaussHermite::new(32).unwrap();
        assert!(r.nodes().windows(2).all(|w| w[0] < w[1]));
        for (a, b) in r.nodes().iter().zip(r.nodes().iter().rev()) {
            assert!((a + b).abs() < 1e-13);
        }
        assert!(r.weights().iter().all(|w| *w > 0.0));
    }

    #[test]
    fn known_three_point_rule() {
        let r = GaussHermite::new(3).unwrap();
        let x = (1.5_f64).sqrt();
        assert!((r.nodes()[0] + x).abs() < 1e-14);
        assert!(r.nodes()[1].abs() < 1e-15);
        assert!((r.weights()[1] - 2.0 * PI.sqrt() / 3.0).abs() < 1e-14);
    }

    #[test]
    fn lognormal_mean_via_rule() {
        // E[exp(mu + s Z)] = exp(mu + s^2 / 2)
        let rule = GaussHermite::new(32).unwrap().standard_normal();
        let (mu, s) = (-0.5, 0.5);
        let m: f64 = rule.iter().map(|(z, w)| w * (mu + s * z).exp()).sum();
        assert!((m - (mu + 0.5 * s * s).exp()).abs() < 1e-13);
    }

    #[test]
    fn legendre_rule_integrates_polynomials() {
        let (x, w) = gauss_legendre(7).unwrap();
        assert!(x.windows(2).all(|p| p[0] < p[1]));
        for k in 0..14 {
            let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((approx - exact).abs() < 1e-14, "k={k}");
        }
    }

    #[test]
    fn composite_rule_matches_normal_moments() {
        let rule = composite_standard_normal(16, 16).unwrap();
        // higher moments see the truncation at 8.5
        for k in 0..7 {
            let approx: f64 = rule.iter().map(|(z, w)| w * z.powi(k as i32)).sum();
            let exact = if k % 2 == 1 {
                0.0
            } else {
                double_factorial_odd(k.max(1) - 1).max(1.0)
            };
            assert!((approx - exact).abs() < 1e-12 * exact.max(1.0), "k={k}: {approx}");
        }
    }

    #[test]
    fn tensor_rule_weights_sum_to_one() {
        let t = tensor_standard_normal(8, 2).unwrap();
        assert_eq!(t.len(), 64);
        let total: f64 = t.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-13);
        let cov: f64 = t.iter().map(|(p, w)| w * p[0] * p[1]).sum();
        assert!(cov.abs() < 1e-14);
    }
}
