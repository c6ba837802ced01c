//! Small dense and tridiagonal solvers.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Solves a tridiagonal system in place with the Thomas algorithm.
/// `lower[i]` couples row i to i-1 (lower[0] unused), `upper[i]` row i to i+1.
pub fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut Vec<f64>) -> Result<()> {
    let n = diag.len();
    if lower.len() != n || upper.len() != n || rhs.len() != n {
        return Err(Error::Mismatch("tridiagonal band lengths differ".into()));
    }
    if n == 0 {
        return Ok(());
    }
    scratch.clear();
    scratch.resize(n, 0.0);
    let mut beta = diag[0];
    if beta == 0.0 {
        return Err(Error::Domain("singular tridiagonal system".into()));
    }
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * scratch[i];
        if beta == 0.0 {
            return Err(Error::Domain("singular tridiagonal system".into()));
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i + 1] * rhs[i + 1];
    }
    Ok(())
}

/// A tridiagonal matrix factored once for repeated Thomas solves.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalFactor {
    lower: Vec<f64>,
    inv_pivot: Vec<f64>,
    ratio: Vec<f64>,
}

impl TridiagonalFactor {
    pub fn new(lower: &[f64], diag: &[f64], upper: &[f64]) -> Result<Self> {
        let n = diag.len();
        if lower.len() != n || upper.len() != n || n == 0 {
            return Err(Error::Mismatch("tridiagonal band lengths differ".into()));
        }
        let mut inv_pivot = Vec::with_capacity(n);
        let mut ratio = alloc::vec![0.0; n];
        let mut beta = diag[0];
        for i in 0..n {
            if i > 0 {
                ratio[i] = upper[i - 1] / beta;
                beta = diag[i] - lower[i] * ratio[i];
            }
            if beta == 0.0 || !beta.is_finite() {
                return Err(Error::Domain("singular tridiagonal system".into()));
            }
            inv_pivot.push(1.0 / beta);
        }
        Ok(Self { lower: lower.to_vec(), inv_pivot, ratio })
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = self.inv_pivot.len();
        rhs[0] *= self.inv_pivot[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.lower[i] * rhs[i - 1]) * self.inv_pivot[i];
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.ratio[i + 1] * rhs[i + 1];
        }
    }
}

/// LU factorization with partial pivoting of a row-major square matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(n: usize, mut a: Vec<f64>) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::Mismatch("matrix is not square".into()));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, a[i * n + k].abs()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pmax == 0.0 || !pmax.is_finite() {
                return Err(Error::Domain("singular matrix in LU".into()));
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let piv = a[k * n + k];
            for i in k + 1..n {
                let f = a[i * n + k] / piv;
                a[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        a[i * n + j] -= f * a[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu: a, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[i * n + j] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[i * n + j] * x[j]).sum();
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn thomas_solves_diagonally_dominant(n in 1usize..40, seed in 0u64..1000) {
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5 };
            let lower: Vec<f64> = (0..n).map(|_| next()).collect();
            let upper: Vec<f64> = (0..n).map(|_| next()).collect();
            let diag: Vec<f64> = (0..n).map(|_| 2.5 + next()).collect();
            let x: Vec<f64> = (0..n).map(|_| next()).collect();
            let mut b = vec![0.0; n];
            for i in 0..n {
                b[i] = diag[i] * x[i];
                if i > 0 { b[i] += lower[i] * x[i - 1]; }
                if i + 1 < n { b[i] += upper[i] * x[i + 1]; }
            }
            let mut scratch = Vec::new();
            thomas(&lower, &diag, &upper, &mut b, &mut scratch).unwrap();
            for i in 0..n { prop_assert!((b[i] - x[i]).abs() < 1e-12); }
        }
    }

    #[test]
    fn factor_matches_thomas() {
        let lower = vec![0.0, -1.0, -1.0, -1.0];
        let diag = vec![3.0, 3.0, 3.0, 3.0];
        let upper = vec![-1.0, -1.0, -1.0, 0.0];
        let f = TridiagonalFactor::new(&lower, &diag, &upper).unwrap();
        let mut a = vec![1.0, 2.0, 3.0, 4.0];
        let mut b = a.clone();
        f.solve_in_place(&mut a);
        thomas(&lower, &diag, &upper, &mut b, &mut Vec::new()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn lu_solves_with_pivoting() {
        let a = vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let lu = Lu::factor(3, a.clone()).unwrap();
        let x = lu.solve(&[3.0, 2.0, 4.0]);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
            assert!((r - [3.0, 2.0, 4.0][i]).abs() < 1e-14);
        }
    }

    #[test]
    fn lu_rejects_singular() {
        assert!(Lu::factor(2, vec![1.0, 2.0, 2.0, 4.0]).is_err());
    }
}
