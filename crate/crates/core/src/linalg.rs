//! Small dense linear algebra over [`Scalar`], row-major `n × n` matrices.
//!
//! The generic kernels only need `J × J` solves with `J` in the tens, so a
//! partially pivoted LU is enough. f64-only code uses nalgebra instead.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Solves `a x = b` in place; `a` is overwritten with its LU factors.
pub fn solve_in_place<T: Scalar>(a: &mut [T], b: &mut [T], n: usize) -> Result<()> {
    if a.len() != n * n || b.len() != n {
        return Err(Error::dim("linear system", n * n, a.len()));
    }
    let scale = a.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let tiny = scale * T::epsilon() * T::lit(n as f64);
    for col in 0..n {
        let (piv, pmax) = (col..n)
            .map(|r| (r, a[r * n + col].abs()))
            .fold((col, -T::one()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pmax > tiny) {
            return Err(Error::InversionFailure(format!(
                "singular matrix (pivot {pmax:e} in column {col})"
            )));
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == T::zero() {
                continue;
            }
            a[r * n + col] = f;
            for k in col + 1..n {
                let v = a[col * n + k];
                a[r * n + k] = a[r * n + k] - f * v;
            }
            b[r] = b[r] - f * b[col];
        }
    }
    for r in (0..n).rev() {
        let mut s = b[r];
        for k in r + 1..n {
            s = s - a[r * n + k] * b[k];
        }
        b[r] = s / a[r * n + r];
    }
    Ok(())
}

pub fn solve<T: Scalar>(a: &[T], b: &[T], n: usize) -> Result<Vec<T>> {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    solve_in_place(&mut a, &mut b, n)?;
    Ok(b)
}

/// Matrix inverse, row-major.
pub fn inverse<T: Scalar>(a: &[T], n: usize) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); n * n];
    for c in 0..n {
        let mut e = vec![T::zero(); n];
        e[c] = T::one();
        let x = solve(a, &e, n)?;
        for r in 0..n {
            out[r * n + c] = x[r];
        }
    }
    Ok(out)
}

pub fn mat_vec<T: Scalar>(a: &[T], x: &[T], n: usize) -> Vec<T> {
    (0..n)
        .map(|r| (0..n).map(|c| a[r * n + c] * x[c]).sum())
        .collect()
}

pub fn mat_mul<T: Scalar>(a: &[T], b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * n];
    for r in 0..n {
        for k in 0..n {
            let v = a[r * n + k];
            for c in 0..n {
                out[r * n + c] = out[r * n + c] + v * b[k * n + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_pivoting_system() {
        let a = [0.0_f64, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let x_true = [1.0, -2.0, 0.5];
        let b = mat_vec(&a, &x_true, 3);
        let x = solve(&a, &b, 3).unwrap();
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = [4.0_f64, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let inv = inverse(&a, 3).unwrap();
        let id = mat_mul(&a, &inv, 3);
        for r in 0..3 {
            for c in 0..3 {
                let e = if r == c { 1.0 } else { 0.0 };
                assert!((id[r * 3 + c] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn singular_matrix_reported() {
        let a = [1.0_f32, 2.0, 2.0, 4.0];
        assert!(matches!(
            solve(&a, &[1.0, 2.0], 2),
            Err(Error::InversionFailure(_))
        ));
    }
}
