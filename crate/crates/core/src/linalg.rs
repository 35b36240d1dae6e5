//! Small dense linear algebra on row-major slices.
//!
//! Systems here are tiny (a handful of electrodes, at most a few tens of
//! ions), so plain Gaussian elimination and cyclic Jacobi are adequate.

use crate::scalar::Real;

/// Square row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![T::zero(); n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), n, "matrix must be square");
            m.data[i * n..(i + 1) * n].copy_from_slice(r);
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        (0..self.n).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Solves `self · x = b` by Gaussian elimination with partial pivoting.
    /// Returns `None` when a pivot falls below `rel_tol · max|a_ij|`.
    pub fn solve(&self, b: &[T], rel_tol: T) -> Option<Vec<T>> {
        let n = self.n;
        let mut a = self.data.clone();
        let mut x = b.to_vec();
        let scale = self.max_abs();
        if scale == T::zero() {
            return None;
        }
        for k in 0..n {
            let (p, pv) = (k..n)
                .map(|i| (i, a[i * n + k].abs()))
                .fold((k, T::zero()), |acc, c| if c.1 > acc.1 { c } else { acc });
            if pv <= rel_tol * scale {
                return None;
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                x.swap(k, p);
            }
            for i in k + 1..n {
                let f = a[i * n + k] / a[k * n + k];
                if f == T::zero() {
                    continue;
                }
                for j in k..n {
                    let akj = a[k * n + j];
                    a[i * n + j] -= f * akj;
                }
                let xk = x[k];
                x[i] -= f * xk;
            }
        }
        for k in (0..n).rev() {
            let s = (k + 1..n).fold(x[k], |s, j| s - a[k * n + j] * x[j]);
            x[k] = s / a[k * n + k];
        }
        Some(x)
    }

    /// True when the (symmetric) matrix admits a Cholesky factorisation.
    pub fn is_positive_definite(&self) -> bool {
        let n = self.n;
        let mut l = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= T::zero() {
                        return false;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        true
    }

    /// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
    ///
    /// Eigenvalues ascend; `vectors[k]` is the unit eigenvector of `values[k]`.
    pub fn symmetric_eigen(&self) -> SymmetricEigen<T> {
        let n = self.n;
        let mut a = self.data.clone();
        let mut v = Matrix::<T>::identity(n).data;
        let eps = T::epsilon();
        for _sweep in 0..100 {
            let off: T = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i * n + j] * a[i * n + j])
                .sum();
            let diag: T = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
            if off <= eps * eps * diag || off == T::zero() {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq == T::zero() {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    let theta = (aqq - app) / (T::lit(2.0) * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[i * n + i].partial_cmp(&a[j * n + j]).unwrap_or(std::cmp::Ordering::Equal));
        let values = order.iter().map(|&k| a[k * n + k]).collect();
        let vectors = order.iter().map(|&k| (0..n).map(|i| v[i * n + k]).collect()).collect();
        SymmetricEigen { values, vectors }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.n + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.n + j]
    }
}

#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    pub values: Vec<T>,
    pub vectors: Vec<Vec<T>>,
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Minimum-norm correction: returns `x` minimising ‖x − x_ref‖₂ subject to
/// `rows · x = rhs`. Rows are normalised before forming the Gram system.
///
/// `None` when the constraint rows are linearly dependent.
pub fn min_norm_correction<T: Real>(rows: &[Vec<T>], rhs: &[T], x_ref: &[T]) -> Option<Vec<T>> {
    let m = rows.len();
    let mut c = Vec::with_capacity(m);
    let mut d = Vec::with_capacity(m);
    for (r, &b) in rows.iter().zip(rhs) {
        let nr = norm(r);
        if nr == T::zero() {
            return None;
        }
        c.push(r.iter().map(|v| *v / nr).collect::<Vec<_>>());
        d.push(b / nr);
    }
    let mut gram = Matrix::zeros(m);
    for i in 0..m {
        for j in 0..m {
            gram[(i, j)] = dot(&c[i], &c[j]);
        }
    }
    let resid: Vec<T> = (0..m).map(|i| d[i] - dot(&c[i], x_ref)).collect();
    let lambda = gram.solve(&resid, T::lit(1e3) * T::epsilon())?;
    let mut x = x_ref.to_vec();
    for (ci, li) in c.iter().zip(&lambda) {
        for (xk, ck) in x.iter_mut().zip(ci) {
            *xk += *li * *ck;
        }
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let a = Matrix::from_rows(&[vec![2.0_f64, 1.0], vec![1.0, 3.0]]);
        let x = a.solve(&[3.0, 5.0], 1e-14).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-15 && (x[1] - 1.4).abs() < 1e-15);
        let sing = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(sing.solve(&[1.0, 2.0], 1e-12).is_none());
    }

    #[test]
    fn jacobi_reconstructs() {
        let a = Matrix::from_rows(&[
            vec![4.0, -1.0, 0.5],
            vec![-1.0, 3.0, 0.2],
            vec![0.5, 0.2, 1.0],
        ]);
        let e = a.symmetric_eigen();
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| e.values[k] * e.vectors[k][i] * e.vectors[k][j]).sum();
                assert!((r - a[(i, j)]).abs() < 1e-13);
                let o = dot(&e.vectors[i], &e.vectors[j]);
                assert!((o - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn definiteness() {
        assert!(Matrix::from_rows(&[vec![2.0, -1.0], vec![-1.0, 2.0]]).is_positive_definite());
        assert!(!Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).is_positive_definite());
    }

    #[test]
    fn min_norm_fixed_point() {
        let rows = vec![vec![1.0, 1.0, 0.0]];
        let x: Vec<f64> = min_norm_correction(&rows, &[2.0], &[1.0, 1.0, 5.0]).unwrap();
        assert_eq!(x, vec![1.0, 1.0, 5.0]);
        let y: Vec<f64> = min_norm_correction(&rows, &[4.0], &[1.0, 1.0, 5.0]).unwrap();
        assert!((y[0] - 2.0).abs() < 1e-15 && (y[1] - 2.0).abs() < 1e-15 && y[2] == 5.0);
    }
}
