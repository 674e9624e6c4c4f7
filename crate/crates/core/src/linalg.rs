//! Small dense linear algebra: row-major matrices, LU with partial pivoting,
//! the cyclic Jacobi eigensolver and an exact rational solver for badly
//! conditioned systems.

use num_rational::BigRational;
use num_traits::{FromPrimitive, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return invalid(format!(
                "matmul shape mismatch: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return invalid(format!(
                "matvec shape mismatch: {}x{} times {}",
                self.rows,
                self.cols,
                x.len()
            ));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += value;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Exact symmetry check; Gram matrices built here are symmetric bit-for-bit.
    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self[(i, j)] == self[(j, i)]))
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    /// Factors `a`. A pivot smaller than `rel_tol * max|a|` counts as singular.
    pub fn factor(a: &DenseMatrix, rel_tol: f64) -> Result<Self> {
        if a.rows != a.cols {
            return invalid(format!(
                "LU needs a square matrix, got {}x{}",
                a.rows, a.cols
            ));
        }
        let n = a.rows;
        let scale = a.max_abs();
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
            if !(pmax > rel_tol * scale) || scale == 0.0 {
                let partial = Lu {
                    n,
                    lu: lu.clone(),
                    perm: perm.clone(),
                };
                return Err(Error::NumericalFailure {
                    reason: format!("matrix is singular at pivot {k} of {n}"),
                    condition: partial.condition_estimate_upto(k).max(1.0 / f64::EPSILON),
                });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if b.len() != n {
            return invalid(format!("rhs has length {}, expected {n}", b.len()));
        }
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        Ok(x)
    }

    /// Ratio of largest to smallest pivot magnitude; a cheap lower bound on the
    /// 2-norm condition number.
    pub fn condition_estimate(&self) -> f64 {
        self.condition_estimate_upto(self.n)
    }

    fn condition_estimate_upto(&self, k: usize) -> f64 {
        let n = self.n;
        let pivots = (0..k).map(|i| self.lu[i * n + i].abs());
        let (lo, hi) = pivots.fold((f64::INFINITY, 0.0f64), |(lo, hi), p| {
            (lo.min(p), hi.max(p))
        });
        if k == 0 || lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `values`.
    pub vectors: DenseMatrix,
    pub sweeps: usize,
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below
/// `tol` times the matrix Frobenius norm.
pub fn symmetric_eigen(a: &DenseMatrix, tol: f64, max_sweeps: usize) -> Result<SymmetricEigen> {
    if !a.is_symmetric() {
        return invalid("Jacobi eigensolver requires a symmetric matrix");
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut v = DenseMatrix::identity(n);
    let total: f64 = m.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= tol * total || total == 0.0 {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}

pub(crate) fn to_rational(x: f64) -> Result<BigRational> {
    BigRational::from_f64(x).ok_or_else(|| Error::InvalidArgument(format!("non-finite value {x}")))
}

/// Exact solve of `a x = b` over the rationals. Every finite `f64` is a dyadic
/// rational, so the only rounding happens when converting the answer back.
pub fn solve_exact(a: &DenseMatrix, b: &[f64]) -> Result<Vec<BigRational>> {
    let n = a.rows;
    if a.cols != n || b.len() != n {
        return invalid("exact solve needs a square system with matching rhs");
    }
    let m = (0..n)
        .map(|i| {
            a.row(i)
                .iter()
                .map(|&x| to_rational(x))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let b = b
        .iter()
        .map(|&x| to_rational(x))
        .collect::<Result<Vec<_>>>()?;
    solve_rational(m, b)
}

/// Gaussian elimination on a square rational system given by rows.
pub(crate) fn solve_rational(
    a: Vec<Vec<BigRational>>,
    b: Vec<BigRational>,
) -> Result<Vec<BigRational>> {
    let n = a.len();
    if b.len() != n || a.iter().any(|r| r.len() != n) {
        return invalid("exact solve needs a square system with matching rhs");
    }
    let mut m: Vec<Vec<BigRational>> = a
        .into_iter()
        .zip(b)
        .map(|(mut row, bi)| {
            row.push(bi);
            row
        })
        .collect();
    for k in 0..n {
        let p = (k..n)
            .find(|&i| !m[i][k].is_zero())
            .ok_or_else(|| Error::NumericalFailure {
                reason: "matrix is exactly singular".into(),
                condition: f64::INFINITY,
            })?;
        m.swap(k, p);
        let pivot = m[k][k].clone();
        for i in k + 1..n {
            if m[i][k].is_zero() {
                continue;
            }
            let f = &m[i][k] / &pivot;
            for j in k..=n {
                let d = &f * &m[k][j];
                m[i][j] -= d;
            }
        }
    }
    let mut x = vec![BigRational::zero(); n];
    for i in (0..n).rev() {
        let mut s = m[i][n].clone();
        for j in i + 1..n {
            s -= &m[i][j] * &x[j];
        }
        x[i] = s / &m[i][i];
    }
    Ok(x)
}

pub(crate) fn rational_to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
