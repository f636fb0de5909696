//! Derivative-free minimization, Latin-hypercube starts and a damped
//! Gauss–Newton polish for least-squares criteria.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadConfig {
    pub max_evals: usize,
    /// Spread of simplex values, relative to `max(1, |best|)`, required to stop.
    pub f_tol: f64,
    /// Largest coordinate distance of a vertex from the best one required to stop.
    pub x_tol: f64,
    pub initial_step: f64,
}

impl Default for NelderMeadConfig {
    fn default() -> Self {
        Self {
            max_evals: 4000,
            f_tol: 1e-14,
            x_tol: 1e-10,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

/// Nelder–Mead with standard coefficients (reflection 1, expansion 2,
/// contraction 1/2, shrink 1/2). Non-finite values rank as `+∞`.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], cfg: &NelderMeadConfig) -> Minimum {
    let n = x0.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    if n == 0 {
        return Minimum {
            x: Vec::new(),
            value: eval(x0),
            evals: 1,
        };
    }
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for k in 0..n {
        let mut v = x0.to_vec();
        v[k] += cfg.initial_step * x0[k].abs().max(1.0);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();
    let mut evals = n + 1;
    while evals < cfg.max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|a, b| values[*a].total_cmp(&values[*b]).then(a.cmp(b)));
        simplex = order.iter().map(|i| simplex[*i].clone()).collect();
        values = order.iter().map(|i| values[*i]).collect();
        let spread = values[n] - values[0];
        let size = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0_f64, f64::max);
        if spread.abs() <= cfg.f_tol * values[0].abs().max(1.0) && size <= cfg.x_tol {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|d| simplex[..n].iter().map(|v| v[d]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(1.0);
        let fr = eval(&xr);
        evals += 1;
        if fr < values[0] {
            let xe = along(2.0);
            let fe = eval(&xe);
            evals += 1;
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let x = along(0.5);
                let v = eval(&x);
                (x, v)
            } else {
                let x = along(-0.5);
                let v = eval(&x);
                (x, v)
            };
            evals += 1;
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for k in 1..=n {
                    simplex[k] = simplex[k]
                        .iter()
                        .zip(&simplex[0])
                        .map(|(v, b)| b + 0.5 * (v - b))
                        .collect();
                    values[k] = eval(&simplex[k]);
                }
                evals += n;
            }
        }
    }
    let best = (0..=n)
        .min_by(|a, b| values[*a].total_cmp(&values[*b]).then(a.cmp(b)))
        .unwrap();
    Minimum {
        x: simplex[best].clone(),
        value: values[best],
        evals,
    }
}

/// `count` points of a Latin hypercube on `[lo, hi]^dim`, each coordinate at
/// the centre of its stratum.
pub fn latin_hypercube(count: usize, dim: usize, lo: f64, hi: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; dim]; count];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(&mut rng);
        for (p, s) in points.iter_mut().zip(strata) {
            let jitter: f64 = rng.random_range(0.25..0.75);
            p[d] = lo + (hi - lo) * (s as f64 + jitter) / count as f64;
        }
    }
    points
}

/// Polishes `x` for `Q(x) = r(x)ᵀ W r(x)` by Levenberg–Marquardt steps with a
/// central-difference Jacobian of the residual map `r`. Steps are accepted
/// only when they lower `Q`; iteration stops once a step gains less than a
/// relative `1e-12`.
pub fn gauss_newton<R>(residuals: R, weight: &DMatrix<f64>, x0: &[f64], max_iter: usize) -> Minimum
where
    R: Fn(&[f64]) -> Option<Vec<f64>>,
{
    gauss_newton_to(residuals, Some(weight), x0, max_iter, 0.0)
}

/// [`gauss_newton`] that also stops once `Q ≤ q_tol`; `None` weights by the
/// identity.
pub fn gauss_newton_to<R>(
    residuals: R,
    weight: Option<&DMatrix<f64>>,
    x0: &[f64],
    max_iter: usize,
    q_tol: f64,
) -> Minimum
where
    R: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let q = |r: &[f64]| {
        let v = DVector::from_column_slice(r);
        match weight {
            Some(w) => (v.transpose() * w * &v)[(0, 0)],
            None => v.norm_squared(),
        }
    };
    let n = x0.len();
    let mut x = x0.to_vec();
    let Some(mut r) = residuals(&x) else {
        return Minimum { x, value: f64::INFINITY, evals: 1 };
    };
    let mut value = q(&r);
    let mut evals = 1;
    let mut lambda = 1e-8;
    if n == 0 {
        return Minimum { x, value, evals };
    }
    for _ in 0..max_iter {
        if value <= q_tol {
            break;
        }
        let m = r.len();
        let mut jac = DMatrix::zeros(m, n);
        let mut ok = true;
        for k in 0..n {
            let h = 1e-6 * x[k].abs().max(1.0);
            let mut up = x.clone();
            let mut dn = x.clone();
            up[k] += h;
            dn[k] -= h;
            match (residuals(&up), residuals(&dn)) {
                (Some(ru), Some(rd)) => {
                    for i in 0..m {
                        jac[(i, k)] = (ru[i] - rd[i]) / (2.0 * h);
                    }
                }
                _ => ok = false,
            }
            evals += 2;
        }
        if !ok {
            break;
        }
        let rv = DVector::from_column_slice(&r);
        let jtw = match weight {
            Some(w) => jac.transpose() * w,
            None => jac.transpose(),
        };
        let normal = &jtw * &jac;
        let grad = &jtw * &rv;
        let mut improved = false;
        for _ in 0..12 {
            let mut damped = normal.clone();
            for k in 0..n {
                damped[(k, k)] += lambda * normal[(k, k)].abs().max(1e-12);
            }
            let Some(step) = damped.lu().solve(&(-&grad)) else {
                lambda *= 10.0;
                continue;
            };
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + s).collect();
            evals += 1;
            if let Some(rc) = residuals(&cand) {
                let vc = q(&rc);
                if vc < value {
                    let moved = step.amax();
                    x = cand;
                    r = rc;
                    let gain = value - vc;
                    value = vc;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = gain > 1e-12 * (value + gain) + 1e-30 && moved > 1e-15 * x.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Minimum { x, value, evals }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nelder_mead_finds_rosenbrock_minimum() {
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = nelder_mead(rosen, &[-1.2, 1.0], &NelderMeadConfig { max_evals: 20_000, ..Default::default() });
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{m:?}");
    }

    #[test]
    fn nelder_mead_ignores_non_finite_regions() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 2.0).powi(2) };
        let m = nelder_mead(f, &[0.5], &NelderMeadConfig::default());
        assert!((m.x[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn hypercube_strata_are_filled_once() {
        let pts = latin_hypercube(16, 3, -2.0, 2.0, 7);
        for d in 0..3 {
            let mut cells: Vec<usize> = pts.iter().map(|p| ((p[d] + 2.0) / 4.0 * 16.0).floor() as usize).collect();
            cells.sort_unstable();
            assert_eq!(cells, (0..16).collect::<Vec<_>>());
        }
        assert_eq!(pts, latin_hypercube(16, 3, -2.0, 2.0, 7));
    }

    #[test]
    fn gauss_newton_solves_linear_least_squares_exactly() {
        // r(x) = A x − b, overdetermined
        let a = [[1.0, 0.5], [0.2, 2.0], [1.0, 1.0]];
        let b = [1.0, -1.0, 0.3];
        let r = |x: &[f64]| Some(a.iter().zip(&b).map(|(row, bi)| row[0] * x[0] + row[1] * x[1] - bi).collect::<Vec<f64>>());
        let w = DMatrix::identity(3, 3);
        let m = gauss_newton(r, &w, &[5.0, 5.0], 50);
        let am = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 0.2, 2.0, 1.0, 1.0]);
        let exact = (am.transpose() * &am).lu().solve(&(am.transpose() * DVector::from_column_slice(&b))).unwrap();
        // the difference Jacobian times a nonzero residual bounds the accuracy
        assert!((m.x[0] - exact[0]).abs() < 1e-8 && (m.x[1] - exact[1]).abs() < 1e-8, "{m:?}");
    }
}
