//! Dense symmetric linear algebra: Cholesky factorization, triangular
//! solves and multivariate normal sampling.

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Dense symmetric matrix stored row-major with both triangles filled.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Builds from a full row-major buffer, checking symmetry to 1e-12
    /// relative to the largest magnitude entry.
    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if data.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                found: data.len(),
            });
        }
        let scale = data.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (data[i * n + j], data[j * n + i]);
                if (a - b).abs() > 1e-12 * scale {
                    return Err(Error::ShapeMismatch(format!(
                        "matrix not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { n, data })
    }

    /// Builds from a function of the lower triangle (`j <= i`); the upper
    /// triangle is mirrored so the result is exactly symmetric.
    pub fn from_lower_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(n > 0, "SymMatrix needs n >= 1");
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Self { n, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_lower_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).fold(f64::MIN, f64::max)
    }

    /// Principal submatrix over `idx` (in the given order).
    pub fn submatrix(&self, idx: &[usize]) -> SymMatrix {
        Self::from_lower_fn(idx.len(), |a, b| self.get(idx[a], idx[b]))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Lower-triangular Cholesky factor with strictly positive diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerCholesky {
    n: usize,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Triangle {
    /// Solve `L x = b`.
    Lower,
    /// Solve `Lᵀ x = b`.
    Upper,
}

impl LowerCholesky {
    /// Wraps an explicit lower-triangular matrix (row-major, `n * n`).
    /// Entries above the diagonal are ignored; the diagonal must be > 0.
    pub fn from_lower(n: usize, mut data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if data.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                found: data.len(),
            });
        }
        for i in 0..n {
            let d = data[i * n + i];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { index: i, pivot: d });
            }
            for j in i + 1..n {
                data[i * n + j] = 0.0;
            }
        }
        Ok(Self { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// log det(L Lᵀ).
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.get(i, i).ln()).sum::<f64>()
    }

    /// L · x.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, x.len())?;
        Ok((0..self.n)
            .map(|i| {
                let row = &self.data[i * self.n..i * self.n + i + 1];
                row.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect())
    }

    /// L · Lᵀ as a dense symmetric matrix.
    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.n;
        SymMatrix::from_lower_fn(n, |i, j| {
            (0..=j).map(|k| self.get(i, k) * self.get(j, k)).sum()
        })
    }
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Cholesky factorization `A = L Lᵀ`.
///
/// Fails with `NotPositiveDefinite` when a pivot drops to or below
/// `1e-12 × max diag(A)`.
pub fn cholesky(a: &SymMatrix) -> Result<LowerCholesky> {
    let n = a.n;
    let tol = 1e-12 * a.max_diagonal().max(0.0);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let row_j = j * n;
        let mut pivot = a.get(j, j);
        for k in 0..j {
            pivot -= l[row_j + k] * l[row_j + k];
        }
        if !(pivot > tol) {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l[row_j + j] = d;
        for i in j + 1..n {
            let row_i = i * n;
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[row_i + k] * l[row_j + k];
            }
            l[row_i + j] = s / d;
        }
    }
    Ok(LowerCholesky { n, data: l })
}

/// Solves `L x = b` or `Lᵀ x = b` by substitution.
pub fn solve_triangular(l: &LowerCholesky, b: &[f64], side: Triangle) -> Result<Vec<f64>> {
    let n = l.n;
    check_len(n, b.len())?;
    let mut x = b.to_vec();
    match side {
        Triangle::Lower => {
            for i in 0..n {
                let row = &l.data[i * n..i * n + i];
                let s: f64 = row.iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
                x[i] = (x[i] - s) / l.data[i * n + i];
            }
        }
        Triangle::Upper => {
            for i in (0..n).rev() {
                let mut s = x[i];
                for k in i + 1..n {
                    s -= l.data[k * n + i] * x[k];
                }
                x[i] = s / l.data[i * n + i];
            }
        }
    }
    Ok(x)
}

/// Solves `(L Lᵀ) x = b`.
pub fn cholesky_solve(l: &LowerCholesky, b: &[f64]) -> Result<Vec<f64>> {
    let w = solve_triangular(l, b, Triangle::Lower)?;
    solve_triangular(l, &w, Triangle::Upper)
}

/// Draws `mean + L z` with `z` i.i.d. standard normal.
pub fn sample_mvn(mean: &[f64], chol: &LowerCholesky, rng: &mut RngState) -> Result<Vec<f64>> {
    check_len(chol.n, mean.len())?;
    let mut z = vec![0.0; chol.n];
    rng.fill_standard_normal(&mut z);
    let mut out = chol.mul_vec(&z)?;
    for (o, m) in out.iter_mut().zip(mean) {
        *o += m;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, rng: &mut RngState) -> SymMatrix {
        let m: Vec<f64> = (0..n * n).map(|_| rng.standard_normal()).collect();
        SymMatrix::from_lower_fn(n, |i, j| {
            let s: f64 = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum();
            s + if i == j { 1.0 } else { 0.0 }
        })
    }

    #[test]
    fn identity_factor() {
        let l = cholesky(&SymMatrix::identity(3)).unwrap();
        assert_eq!(l, LowerCholesky::identity(3));
    }

    #[test]
    fn two_by_two_closed_form() {
        let a = SymMatrix::from_row_major(2, vec![4.0, 2.0, 2.0, 5.0]).unwrap();
        let l = cholesky(&a).unwrap();
        assert_eq!(l.as_slice(), &[2.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn random_spd_reconstructs() {
        let mut rng = RngState::new(11);
        for n in [1, 2, 10, 50, 200] {
            let a = random_spd(n, &mut rng);
            let l = cholesky(&a).unwrap();
            let r = l.reconstruct();
            let diff: f64 = r
                .as_slice()
                .iter()
                .zip(a.as_slice())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            let rel = diff / a.frobenius_norm();
            let bound = if n <= 10 { 1e-10 } else { 1e-8 };
            assert!(rel < bound, "n={n} rel={rel}");
        }
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        let a = SymMatrix::from_row_major(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(cholesky(&a), Err(Error::NotPositiveDefinite { index: 1, .. })));
        assert!(SymMatrix::from_row_major(2, vec![1.0, 0.5, 0.4, 1.0]).is_err());
    }

    #[test]
    fn triangular_solves() {
        let id = LowerCholesky::identity(3);
        let b = [1.0, -2.0, 3.5];
        assert_eq!(solve_triangular(&id, &b, Triangle::Lower).unwrap(), b);

        let l = LowerCholesky::from_lower(2, vec![2.0, 0.0, 1.0, 2.0]).unwrap();
        let x = solve_triangular(&l, &[2.0, 3.0], Triangle::Lower).unwrap();
        assert_eq!(x, vec![1.0, 1.0]);

        assert!(matches!(
            solve_triangular(&l, &[1.0], Triangle::Upper),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn random_triangular_residuals() {
        let mut rng = RngState::new(5);
        for n in [3, 17, 60] {
            let l = cholesky(&random_spd(n, &mut rng)).unwrap();
            let b: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
            let x = solve_triangular(&l, &b, Triangle::Lower).unwrap();
            let lx = l.mul_vec(&x).unwrap();
            let res = lx.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(res < 1e-12 * bn.max(1.0), "lower n={n} res={res}");

            let x = solve_triangular(&l, &b, Triangle::Upper).unwrap();
            let ltx: Vec<f64> = (0..n)
                .map(|i| (i..n).map(|k| l.get(k, i) * x[k]).sum())
                .collect();
            let res = ltx.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            assert!(res < 1e-10 * bn, "upper n={n} res={res}");
        }
    }

    #[test]
    fn mvn_is_reproducible() {
        let chol = LowerCholesky::identity(4);
        let a = sample_mvn(&[0.0; 4], &chol, &mut RngState::new(9)).unwrap();
        let b = sample_mvn(&[0.0; 4], &chol, &mut RngState::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mvn_degenerate_scale() {
        assert!(LowerCholesky::from_lower(2, vec![0.0, 0.0, 0.0, 0.0]).is_err());
        let tiny = LowerCholesky::from_lower(2, vec![1e-6, 0.0, 0.0, 1e-6]).unwrap();
        let mut rng = RngState::new(1);
        for _ in 0..100 {
            let x = sample_mvn(&[5.0, 5.0], &tiny, &mut rng).unwrap();
            assert!(x.iter().all(|v| (v - 5.0).abs() < 1e-4));
        }
    }

    #[test]
    fn mvn_empirical_covariance() {
        let a = SymMatrix::from_row_major(
            3,
            vec![2.0, 0.6, -0.3, 0.6, 1.0, 0.2, -0.3, 0.2, 0.5],
        )
        .unwrap();
        let l = cholesky(&a).unwrap();
        let mut rng = RngState::new(2024);
        let draws = 200_000;
        let mut acc = [0.0; 9];
        for _ in 0..draws {
            let x = sample_mvn(&[0.0; 3], &l, &mut rng).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    acc[i * 3 + j] += x[i] * x[j];
                }
            }
        }
        for (k, v) in acc.iter().enumerate() {
            let emp = v / draws as f64;
            assert!((emp - a.as_slice()[k]).abs() < 0.02, "entry {k}: {emp}");
        }
    }
}
