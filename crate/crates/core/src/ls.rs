//! Full-field periodic Lippmann-Schwinger solver in 1D.
//!
//! The periodic strain Green's operator of a homogeneous reference medium with
//! stiffness `c0` acts in 1D as mean removal scaled by `1/c0`: its Fourier
//! symbol is `1/c0` on every nonzero mode and `0` on the mean. The fixed point
//!
//! ```text
//! eps <- eps_macro - Gamma[(C - c0) eps]
//! ```
//!
//! keeps the mean strain pinned to `eps_macro` at every iterate and contracts
//! whenever `max |C - c0| < c0`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid1D, ScalarField1D};
use crate::linalg::{DenseMatrix, Lu};

/// Strictly positive stiffness sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StiffnessField(ScalarField1D);

impl StiffnessField {
    pub fn new(field: ScalarField1D) -> Result<Self> {
        if field.values().iter().any(|&c| !(c > 0.0)) {
            return invalid("stiffness must be strictly positive");
        }
        Ok(Self(field))
    }

    pub fn from_fn(grid: &Grid1D, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(ScalarField1D::from_fn(grid, f)?)
    }

    /// `C(x) = 1 / (1 + x^2)`, the heterogeneous bar used throughout the experiments.
    pub fn inverse_quadratic(grid: &Grid1D) -> Result<Self> {
        Self::from_fn(grid, |x| 1.0 / (1.0 + x * x))
    }

    pub fn field(&self) -> &ScalarField1D {
        &self.0
    }

    pub fn grid(&self) -> &Grid1D {
        self.0.grid()
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }
}

/// Homogeneous reference medium `C0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMedium {
    pub c0: f64,
}

impl ReferenceMedium {
    pub fn new(c0: f64) -> Result<Self> {
        if !(c0 > 0.0 && c0.is_finite()) {
            return invalid(format!("reference stiffness must be positive, got {c0}"));
        }
        Ok(Self { c0 })
    }

    /// `(min C + max C) / 2`, which contracts for any positive contrast.
    pub fn midrange(c: &StiffnessField) -> Self {
        Self {
            c0: 0.5 * (c.field().min() + c.field().max()),
        }
    }

    /// Largest pointwise amplification `max |C - c0| / c0` of the fixed-point map.
    pub fn contraction_ratio(&self, c: &StiffnessField) -> f64 {
        c.values()
            .iter()
            .map(|&ci| (ci - self.c0).abs())
            .fold(0.0, f64::max)
            / self.c0
    }

    pub fn check_contraction(&self, c: &StiffnessField) -> Result<()> {
        let ratio = self.contraction_ratio(c);
        if ratio < 1.0 {
            Ok(())
        } else {
            invalid(format!(
                "reference medium c0 = {} does not contract (ratio {ratio})",
                self.c0
            ))
        }
    }
}

/// Full-field solution of the periodic cell problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LSSolution {
    pub strain: ScalarField1D,
    pub stress: ScalarField1D,
    pub macro_strain: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl LSSolution {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,strain,stress")?;
        let pts = self.strain.grid().points();
        for ((x, e), s) in pts
            .iter()
            .zip(self.strain.values())
            .zip(self.stress.values())
        {
            writeln!(w, "{x:e},{e:e},{s:e}")?;
        }
        Ok(())
    }

    pub fn diagnostics_json(&self) -> serde_json::Value {
        serde_json::json!({
            "macro_strain": self.macro_strain,
            "iterations": self.iterations,
            "residual": self.residual,
            "n": self.strain.grid().n(),
        })
    }
}

pub(crate) fn green_apply_values(tau: &[f64], c0: f64) -> Vec<f64> {
    let mean = tau.iter().sum::<f64>() / tau.len() as f64;
    tau.iter().map(|t| (t - mean) / c0).collect()
}

/// `Gamma[tau] = (tau - <tau>) / c0`.
pub fn green_apply(tau: &ScalarField1D, reference: &ReferenceMedium) -> Result<ScalarField1D> {
    ScalarField1D::new(
        tau.grid().clone(),
        green_apply_values(tau.values(), reference.c0),
    )
}

pub const DEFAULT_TOL: f64 = 1e-10;

/// Largest update accepted as converged. The map contracts by `rho` in the
/// RMS norm, so the remaining error is at most `rho/(1-rho)` times the last
/// update; requiring that bound below `tol |eps_macro|` keeps the relative L2
/// error under `tol`. Never looser than `tol` itself.
fn stopping_threshold(tol: f64, rho: f64, eps_macro: f64) -> f64 {
    if rho <= 0.0 {
        return tol;
    }
    tol.min(tol * eps_macro.abs() * (1.0 - rho) / rho)
}

/// Iterations the fixed point needs at contraction ratio `rho` for a unit
/// macro strain; infinite when the map does not contract.
pub fn predicted_iterations(rho: f64, tol: f64) -> f64 {
    if rho <= 0.0 {
        1.0
    } else if rho >= 1.0 {
        f64::INFINITY
    } else {
        stopping_threshold(tol, rho, 1.0).ln() / rho.ln()
    }
}
pub const DEFAULT_MAX_ITER: usize = 50_000;

pub fn solve_full_field(
    c: &StiffnessField,
    eps_macro: f64,
    reference: &ReferenceMedium,
    tol: f64,
    max_iter: usize,
) -> Result<LSSolution> {
    if !(tol > 0.0) {
        return invalid(format!("tolerance must be positive, got {tol}"));
    }
    if !eps_macro.is_finite() {
        return invalid("macro strain must be finite");
    }
    reference.check_contraction(c)?;
    let cv = c.values();
    let c0 = reference.c0;
    let n = cv.len();
    let target = stopping_threshold(tol, reference.contraction_ratio(c), eps_macro);
    let mut eps = vec![eps_macro; n];
    let mut tau = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        for i in 0..n {
            tau[i] = (cv[i] - c0) * eps[i];
        }
        let mean = tau.iter().sum::<f64>() / n as f64;
        residual = 0.0;
        for i in 0..n {
            let next = eps_macro - (tau[i] - mean) / c0;
            residual = f64::max(residual, (next - eps[i]).abs());
            eps[i] = next;
        }
        let floor = 8.0 * f64::EPSILON * eps.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        if residual <= target || residual <= floor {
            return finish(c, eps, eps_macro, it, residual);
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: max_iter,
        residual,
    })
}

fn finish(
    c: &StiffnessField,
    eps: Vec<f64>,
    eps_macro: f64,
    iterations: usize,
    residual: f64,
) -> Result<LSSolution> {
    let grid = c.grid().clone();
    let stress = eps.iter().zip(c.values()).map(|(e, ci)| e * ci).collect();
    Ok(LSSolution {
        strain: ScalarField1D::new(grid.clone(), eps)?,
        stress: ScalarField1D::new(grid, stress)?,
        macro_strain: eps_macro,
        iterations,
        residual,
    })
}

/// Dense direct solve of `(I + Gamma diag(C - c0)) eps = eps_macro`, for
/// cross-checking the fixed-point path on small grids.
pub fn solve_full_field_dense(
    c: &StiffnessField,
    eps_macro: f64,
    reference: &ReferenceMedium,
) -> Result<LSSolution> {
    let n = c.grid().n();
    if n > 2048 {
        return invalid(format!("dense solve limited to n <= 2048, got {n}"));
    }
    let c0 = reference.c0;
    let cv = c.values();
    let inv_n = 1.0 / n as f64;
    let m = DenseMatrix::from_fn(n, n, |i, j| {
        let proj = if i == j { 1.0 - inv_n } else { -inv_n };
        let id = if i == j { 1.0 } else { 0.0 };
        id + proj * (cv[j] - c0) / c0
    });
    let lu = Lu::factor(&m, 1e-14)?;
    let eps = lu.solve(&vec![eps_macro; n])?;
    finish(c, eps, eps_macro, 1, 0.0)
}

/// Closed-form solution: 1D equilibrium forces a uniform stress
/// `sigma = eps_macro / <1/C>` and `eps(x) = sigma / C(x)`.
pub fn analytic_solution(c: &StiffnessField, eps_macro: f64) -> Result<LSSolution> {
    let cv = c.values();
    let compliance = cv.iter().map(|ci| 1.0 / ci).sum::<f64>() / cv.len() as f64;
    let sigma = eps_macro / compliance;
    let eps: Vec<f64> = cv.iter().map(|ci| sigma / ci).collect();
    let grid = c.grid().clone();
    Ok(LSSolution {
        strain: ScalarField1D::new(grid.clone(), eps)?,
        stress: ScalarField1D::constant(&grid, sigma)?,
        macro_strain: eps_macro,
        iterations: 0,
        residual: 0.0,
    })
}

/// `A(x) = eps(x) / eps_M` from a unit macro-strain probe.
pub fn strain_concentration(
    c: &StiffnessField,
    reference: &ReferenceMedium,
    tol: f64,
) -> Result<ScalarField1D> {
    let sol = solve_full_field(c, 1.0, reference, tol, DEFAULT_MAX_ITER)?;
    Ok(sol.strain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{relative_l2, Domain1D};
    use approx::assert_relative_eq;

    fn bar(n: usize) -> StiffnessField {
        let g = Grid1D::uniform(Domain1D::new(0.0, 10.0).unwrap(), n).unwrap();
        StiffnessField::inverse_quadratic(&g).unwrap()
    }

    #[test]
    fn green_annihilates_constants_and_keeps_zero_mean() {
        let g = Grid1D::uniform(Domain1D::new(0.0, 1.0).unwrap(), 16).unwrap();
        let r = ReferenceMedium::new(1.0).unwrap();
        let c = ScalarField1D::constant(&g, 3.5).unwrap();
        assert!(green_apply(&c, &r)
            .unwrap()
            .values()
            .iter()
            .all(|v| v.abs() < 1e-15));

        let cosf = ScalarField1D::from_fn(&g, |x| (2.0 * std::f64::consts::PI * x).cos()).unwrap();
        let out = green_apply(&cosf, &r).unwrap();
        for (a, b) in out.values().iter().zip(cosf.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn homogeneous_medium_converges_in_one_iteration() {
        let g = Grid1D::uniform(Domain1D::new(0.0, 1.0).unwrap(), 32).unwrap();
        let c = StiffnessField::from_fn(&g, |_| 2.0).unwrap();
        let r = ReferenceMedium::midrange(&c);
        let sol = solve_full_field(&c, 0.3, &r, 1e-10, 100).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.strain.values().iter().all(|&e| e == 0.3));
    }

    #[test]
    fn bar_matches_uniform_stress_closed_form() {
        let c = bar(4096);
        let r = ReferenceMedium::midrange(&c);
        let sol = solve_full_field(&c, 0.13, &r, 1e-10, DEFAULT_MAX_ITER).unwrap();
        let exact = analytic_solution(&c, 0.13).unwrap();
        assert!(relative_l2(sol.strain.values(), exact.strain.values()) < 1e-8);
        // eps(0) -> 0.13 * 3/103 as the grid refines
        assert_relative_eq!(
            exact.strain.values()[0],
            0.13 * 3.0 / 103.0,
            max_relative = 1e-4
        );
        let s = &sol.stress;
        assert!((s.max() - s.min()) < 1e-9);
        assert_relative_eq!(s.mean(), 0.13 * 3.0 / 103.0, max_relative = 1e-4);
    }

    #[test]
    fn analytic_constant_and_limits() {
        let g = Grid1D::uniform(Domain1D::new(0.0, 10.0).unwrap(), 64).unwrap();
        let c = StiffnessField::from_fn(&g, |_| 4.0).unwrap();
        let sol = analytic_solution(&c, 0.5).unwrap();
        assert!(sol.stress.values().iter().all(|&s| (s - 2.0).abs() < 1e-15));

        // <1/C> -> 103/3 under refinement, midpoint rule error ~ dx^2
        let mut prev = f64::INFINITY;
        for n in [64, 256, 1024, 4096] {
            let c = bar(n);
            let compliance = c.values().iter().map(|v| 1.0 / v).sum::<f64>() / n as f64;
            let err = (compliance - 103.0 / 3.0).abs();
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 1e-4);
        let exact = analytic_solution(&bar(16384), 1.0).unwrap();
        let v = exact.strain.values();
        assert_relative_eq!(v[v.len() - 1] / v[0], 101.0, max_relative = 1e-3);
    }

    #[test]
    fn concentration_has_unit_mean() {
        let c = bar(512);
        let r = ReferenceMedium::midrange(&c);
        let a = strain_concentration(&c, &r, 1e-12).unwrap();
        assert!((a.mean() - 1.0).abs() < 1e-12);
        let pts = c.grid().points();
        let m: f64 = pts.iter().map(|x| 1.0 + x * x).sum::<f64>() / pts.len() as f64;
        for (ai, x) in a.values().iter().zip(pts) {
            assert_relative_eq!(*ai, (1.0 + x * x) / m, max_relative = 1e-8);
        }
    }

    #[test]
    fn dense_path_agrees_with_fixed_point() {
        let c = bar(128);
        let r = ReferenceMedium::midrange(&c);
        let a = solve_full_field(&c, 0.2, &r, 1e-12, DEFAULT_MAX_ITER).unwrap();
        let b = solve_full_field_dense(&c, 0.2, &r).unwrap();
        assert!(relative_l2(a.strain.values(), b.strain.values()) < 1e-9);
    }

    #[test]
    fn non_contracting_reference_rejected() {
        let c = bar(64);
        let r = ReferenceMedium::new(0.1).unwrap();
        assert!(matches!(
            solve_full_field(&c, 0.2, &r, 1e-10, 10),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn reports_convergence_failure() {
        let c = bar(64);
        let r = ReferenceMedium::midrange(&c);
        match solve_full_field(&c, 0.2, &r, 1e-14, 3) {
            Err(Error::ConvergenceFailure {
                iterations,
                residual,
            }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 1e-14);
            }
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }

    #[test]
    fn csv_and_diagnostics() {
        let c = bar(8);
        let sol = analytic_solution(&c, 0.1).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("x,strain,stress\n"));
        assert_eq!(sol.diagnostics_json()["n"], 8);
    }
}
