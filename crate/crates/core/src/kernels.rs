//! Positive-definite kernels, Gram matrices, spectral checks and the
//! primal/dual least-squares identity.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use num_rational::BigRational;

use crate::linalg::{
    rational_to_f64, solve_rational, symmetric_eigen, to_rational, DenseMatrix, Lu,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(-|x - y|^2 / (2 sigma^2))`
    Gaussian { sigma: f64 },
    /// `exp(-alpha |x - y|)`
    Laplacian { alpha: f64 },
    /// `(x . y + offset)^degree`
    Polynomial { degree: u32, offset: f64 },
    /// `x . y`
    Linear,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { sigma } if !(sigma > 0.0) => {
                invalid(format!("gaussian sigma must be positive, got {sigma}"))
            }
            KernelSpec::Laplacian { alpha } if !(alpha > 0.0) => {
                invalid(format!("laplacian alpha must be positive, got {alpha}"))
            }
            KernelSpec::Polynomial { degree, .. } if degree < 1 => {
                invalid("polynomial degree must be at least 1")
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let dot = || x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let dist2 = || x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        match *self {
            KernelSpec::Gaussian { sigma } => (-dist2() / (2.0 * sigma * sigma)).exp(),
            KernelSpec::Laplacian { alpha } => (-alpha * dist2().sqrt()).exp(),
            KernelSpec::Polynomial { degree, offset } => (dot() + offset).powi(degree as i32),
            KernelSpec::Linear => dot(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub matrix: DenseMatrix,
    pub points: Vec<Vec<f64>>,
}

impl GramMatrix {
    /// Wraps an arbitrary square matrix, e.g. one produced by a candidate
    /// kernel that is not positive definite.
    pub fn from_matrix(matrix: DenseMatrix) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return invalid("Gram matrix must be square");
        }
        Ok(Self {
            matrix,
            points: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.n() {
            let row: Vec<String> = self
                .matrix
                .row(i)
                .iter()
                .map(|v| format!("{v:e}"))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `G_ij = K(x_i, x_j)`; each unordered pair is evaluated once so the result
/// is symmetric bit-for-bit.
pub fn gram(kernel: &KernelSpec, points: &[Vec<f64>]) -> Result<GramMatrix> {
    kernel.validate()?;
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return invalid("points must be finite");
    }
    let n = points.len();
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(&points[i], &points[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(GramMatrix {
        matrix: m,
        points: points.to_vec(),
    })
}

pub fn gram_1d(kernel: &KernelSpec, points: &[f64]) -> Result<GramMatrix> {
    let pts: Vec<Vec<f64>> = points.iter().map(|&x| vec![x]).collect();
    gram(kernel, &pts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdVerdict {
    pub is_psd: bool,
    pub min_eigenvalue: f64,
}

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_SWEEPS: usize = 100;

pub fn check_psd(gram: &GramMatrix, tol: f64) -> Result<PsdVerdict> {
    if !gram.matrix.is_symmetric() {
        return invalid("PSD check requires a symmetric matrix");
    }
    if gram.n() == 0 {
        return Ok(PsdVerdict {
            is_psd: true,
            min_eigenvalue: 0.0,
        });
    }
    let eig = symmetric_eigen(&gram.matrix, JACOBI_TOL, JACOBI_SWEEPS)?;
    let min_eigenvalue = *eig.values.last().unwrap();
    Ok(PsdVerdict {
        is_psd: min_eigenvalue >= -tol,
        min_eigenvalue,
    })
}

/// Finite Mercer expansion `G = sum_i lambda_i v_i v_i^T`.
#[derive(Debug, Clone)]
pub struct MercerDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors as columns.
    pub eigenvectors: DenseMatrix,
    /// Max-norm of `G - sum lambda_i v_i v_i^T`.
    pub reconstruction_error: f64,
}

pub fn mercer_reconstruct(gram: &GramMatrix, psd_tol: f64) -> Result<MercerDecomposition> {
    let verdict = check_psd(gram, psd_tol)?;
    if !verdict.is_psd {
        return invalid(format!(
            "matrix is not PSD (min eigenvalue {:e})",
            verdict.min_eigenvalue
        ));
    }
    let eig = symmetric_eigen(&gram.matrix, JACOBI_TOL, JACOBI_SWEEPS)?;
    let n = gram.n();
    let v = &eig.vectors;
    let mut err = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let r: f64 = (0..n).map(|l| eig.values[l] * v[(i, l)] * v[(j, l)]).sum();
            err = err.max((r - gram.matrix[(i, j)]).abs());
        }
    }
    Ok(MercerDecomposition {
        eigenvalues: eig.values,
        eigenvectors: eig.vectors,
        reconstruction_error: err,
    })
}

pub const OLS_RIDGE: f64 = 1e-10;
const INVERTIBLE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsIdentity {
    pub primal: Vec<f64>,
    pub dual: Vec<f64>,
    pub discrepancy: f64,
    /// Ridge added to both normal matrices (0 when both were invertible).
    pub ridge: f64,
}

/// Compares `(Phi^T Phi)^{-1} Phi^T y` with `Phi^T (Phi Phi^T)^{-1} y`.
///
/// If either normal matrix is numerically singular both receive the same
/// ridge `lambda I`, under which the two forms agree exactly. The singular one
/// then has condition number around `1/lambda`, so with a ridge both forms are
/// evaluated independently in exact rational arithmetic.
pub fn ols_dual_identity(features: &DenseMatrix, targets: &[f64]) -> Result<OlsIdentity> {
    let n = features.rows();
    if targets.len() != n {
        return invalid(format!("{} targets for {n} feature rows", targets.len()));
    }
    if features
        .data()
        .iter()
        .chain(targets)
        .any(|v| !v.is_finite())
    {
        return invalid("features and targets must be finite");
    }
    let phi_t = features.transpose();
    let primal_m = phi_t.matmul(features)?;
    let dual_m = features.matmul(&phi_t)?;
    let invertible = |m: &DenseMatrix| Lu::factor(m, INVERTIBLE_TOL).is_ok();
    let irreparable = |e: Error| match e {
        Error::NumericalFailure { condition, .. } => Error::NumericalFailure {
            reason: "normal matrix singular even after ridge".into(),
            condition,
        },
        other => other,
    };

    let (primal, dual, ridge) = if invertible(&primal_m) && invertible(&dual_m) {
        let primal = Lu::factor(&primal_m, 1e-15)
            .map_err(irreparable)?
            .solve(&phi_t.matvec(targets)?)?;
        let alpha = Lu::factor(&dual_m, 1e-15)
            .map_err(irreparable)?
            .solve(targets)?;
        (primal, phi_t.matvec(&alpha)?, 0.0)
    } else {
        let phi = rational_rows(features)?;
        let phi_tr = rational_rows(&phi_t)?;
        let lambda = to_rational(OLS_RIDGE)?;
        let y = targets
            .iter()
            .map(|&v| to_rational(v))
            .collect::<Result<Vec<_>>>()?;

        let phi_ty: Vec<BigRational> = phi_tr.iter().map(|row| dot(row, &y)).collect();
        let primal = solve_rational(ridge_gram(&phi_tr, &lambda), phi_ty).map_err(irreparable)?;
        let alpha = solve_rational(ridge_gram(&phi, &lambda), y).map_err(irreparable)?;
        let dual = phi_tr
            .iter()
            .map(|row| rational_to_f64(&dot(row, &alpha)))
            .collect();
        (
            primal.iter().map(rational_to_f64).collect(),
            dual,
            OLS_RIDGE,
        )
    };
    let discrepancy = primal
        .iter()
        .zip(&dual)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(OlsIdentity {
        primal,
        dual,
        discrepancy,
        ridge,
    })
}

fn rational_rows(m: &DenseMatrix) -> Result<Vec<Vec<BigRational>>> {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|&x| to_rational(x)).collect())
        .collect()
}

fn dot(a: &[BigRational], b: &[BigRational]) -> BigRational {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `A A^T + lambda I` for `A` given by rows.
fn ridge_gram(rows: &[Vec<BigRational>], lambda: &BigRational) -> Vec<Vec<BigRational>> {
    (0..rows.len())
        .map(|i| {
            (0..rows.len())
                .map(|j| {
                    let g = dot(&rows[i], &rows[j]);
                    if i == j {
                        g + lambda
                    } else {
                        g
                    }
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gram_examples() {
        let g = gram_1d(&KernelSpec::Gaussian { sigma: 0.7 }, &[2.0, 2.0, 2.0]).unwrap();
        assert!(g.matrix.data().iter().all(|&v| v == 1.0));
        let g = gram_1d(&KernelSpec::Linear, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            g.matrix.data(),
            &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 3.0, 6.0, 9.0]
        );
        let g = gram_1d(&KernelSpec::Laplacian { alpha: 1.0 }, &[0.0, 1.0]).unwrap();
        assert_eq!(g.matrix[(0, 1)], (-1.0f64).exp());
        assert_eq!(g.matrix[(1, 1)], 1.0);
        assert!(gram_1d(&KernelSpec::Gaussian { sigma: 0.0 }, &[1.0]).is_err());
        assert!(gram_1d(
            &KernelSpec::Polynomial {
                degree: 0,
                offset: 1.0
            },
            &[1.0]
        )
        .is_err());
    }

    #[test]
    fn negative_constant_kernel_is_not_psd() {
        for n in [1, 3, 6] {
            let g = GramMatrix::from_matrix(DenseMatrix::from_fn(n, n, |_, _| -1.0)).unwrap();
            let v = check_psd(&g, 1e-10).unwrap();
            assert!(!v.is_psd);
            assert_abs_diff_eq!(v.min_eigenvalue, -(n as f64), epsilon = 1e-12);
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let g =
            GramMatrix::from_matrix(DenseMatrix::from_vec(2, 2, vec![1.0, 0.5, 0.4, 1.0]).unwrap())
                .unwrap();
        assert!(matches!(
            check_psd(&g, 1e-10),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn mercer_identity_and_rank_one() {
        let id = GramMatrix::from_matrix(DenseMatrix::identity(4)).unwrap();
        let m = mercer_reconstruct(&id, 1e-12).unwrap();
        assert!(m.eigenvalues.iter().all(|&l| (l - 1.0).abs() < 1e-15));
        assert_eq!(m.reconstruction_error, 0.0);

        let x = [1.0, -2.0, 0.5];
        let g = GramMatrix::from_matrix(DenseMatrix::from_fn(3, 3, |i, j| x[i] * x[j])).unwrap();
        let m = mercer_reconstruct(&g, 1e-12).unwrap();
        assert_abs_diff_eq!(m.eigenvalues[0], 5.25, epsilon = 1e-12);
        assert!(m.eigenvalues[1..].iter().all(|l| l.abs() < 1e-12));
        let neg = GramMatrix::from_matrix(DenseMatrix::from_fn(2, 2, |_, _| -1.0)).unwrap();
        assert!(mercer_reconstruct(&neg, 1e-10).is_err());
    }

    #[test]
    fn ols_orthonormal_and_square() {
        // orthonormal columns: both forms give Phi^T y
        let phi = DenseMatrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let y = [2.0, -1.0, 5.0];
        let r = ols_dual_identity(&phi, &y).unwrap();
        assert_abs_diff_eq!(r.primal[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.primal[1], -1.0, epsilon = 1e-9);
        assert!(r.discrepancy < 1e-12);
        assert_eq!(r.ridge, OLS_RIDGE);

        let sq = DenseMatrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let r = ols_dual_identity(&sq, &[3.0, 5.0]).unwrap();
        assert_eq!(r.ridge, 0.0);
        assert_abs_diff_eq!(r.primal[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(r.primal[1], 1.4, epsilon = 1e-12);
        assert!(r.discrepancy < 1e-12);
    }

    #[test]
    fn ols_random_tall_and_wide_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for (n, p) in [(8, 3), (3, 8), (12, 2)] {
            for _ in 0..10 {
                let data = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
                let phi = DenseMatrix::from_vec(n, p, data).unwrap();
                let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let r = ols_dual_identity(&phi, &y).unwrap();
                assert_eq!(r.ridge, OLS_RIDGE);
                assert!(r.discrepancy < 1e-12, "{n}x{p}: {}", r.discrepancy);
            }
        }
    }

    #[test]
    fn ols_length_mismatch() {
        let phi = DenseMatrix::identity(2);
        assert!(ols_dual_identity(&phi, &[1.0]).is_err());
    }
}
