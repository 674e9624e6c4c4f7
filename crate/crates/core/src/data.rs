//! SCA-generated datasets for the learned operators.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::gkn::TrainingSample;
use crate::grid::{Domain1D, Grid1D, PiecewiseConstantField, ScalarField1D};
use crate::ls::{
    analytic_solution, predicted_iterations, strain_concentration, ReferenceMedium, StiffnessField,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::sca::{composite_clustering, kmeans, ScaOffline, DEFAULT_KMEANS_ITER};

/// Stiffness profile `C(x)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StiffnessSpec {
    /// `1 / (1 + x^2)`
    #[default]
    InverseQuadratic,
    Constant {
        value: f64,
    },
    Piecewise {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
}

impl StiffnessSpec {
    pub fn field(&self, grid: &Grid1D) -> Result<StiffnessField> {
        match self {
            StiffnessSpec::InverseQuadratic => StiffnessField::inverse_quadratic(grid),
            StiffnessSpec::Constant { value } => StiffnessField::from_fn(grid, |_| *value),
            StiffnessSpec::Piecewise {
                breakpoints,
                values,
            } => {
                let phi = PiecewiseConstantField::new(breakpoints.clone(), values.clone())?;
                if phi.domain() != grid.domain() {
                    return invalid("piecewise stiffness must span the grid domain");
                }
                let vals = grid
                    .points()
                    .iter()
                    .map(|&x| phi.eval(x))
                    .collect::<Result<Vec<_>>>()?;
                StiffnessField::new(ScalarField1D::new(grid.clone(), vals)?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcentrationMethod {
    FixedPoint,
    /// Uniform-stress closed form, the limit of the fixed point in 1D.
    ClosedForm,
}

/// Stiffness, reference medium and strain concentration on one grid: the
/// parts of the offline stage shared by every cluster count.
#[derive(Debug, Clone)]
pub struct ScaProblem {
    pub stiffness: StiffnessField,
    pub reference: ReferenceMedium,
    pub concentration: ScalarField1D,
    pub concentration_method: ConcentrationMethod,
}

impl ScaProblem {
    /// Uses the fixed-point solver unless its contraction ratio predicts more
    /// than the default iteration budget (very high contrast, e.g. long
    /// domains with `1/(1+x^2)`), where the closed form is used instead.
    pub fn new(domain: Domain1D, n: usize, spec: &StiffnessSpec) -> Result<Self> {
        let grid = Grid1D::uniform(domain, n)?;
        let stiffness = spec.field(&grid)?;
        let reference = ReferenceMedium::midrange(&stiffness);
        let ratio = reference.contraction_ratio(&stiffness);
        let (concentration, concentration_method) =
            if predicted_iterations(ratio, DEFAULT_TOL) <= DEFAULT_MAX_ITER as f64 {
                (
                    strain_concentration(&stiffness, &reference, DEFAULT_TOL)?,
                    ConcentrationMethod::FixedPoint,
                )
            } else {
                (
                    analytic_solution(&stiffness, 1.0)?.strain,
                    ConcentrationMethod::ClosedForm,
                )
            };
        Ok(Self {
            stiffness,
            reference,
            concentration,
            concentration_method,
        })
    }

    pub fn grid(&self) -> &Grid1D {
        self.stiffness.grid()
    }

    pub fn domain(&self) -> Domain1D {
        self.grid().domain()
    }

    /// k-means on the strain concentration, then the interaction tensor.
    pub fn offline(&self, k: usize, seed: u64) -> Result<ScaOffline> {
        let clustering = kmeans(&self.concentration, k, seed, DEFAULT_KMEANS_ITER)?;
        ScaOffline::from_clustering(clustering, &self.stiffness, &self.reference)
    }

    /// Separate clusterings left and right of `split`.
    pub fn offline_composite(
        &self,
        split: f64,
        k_left: usize,
        k_right: usize,
        seed: u64,
    ) -> Result<ScaOffline> {
        let clustering = composite_clustering(
            self.grid(),
            split,
            k_left,
            k_right,
            &self.concentration,
            seed,
        )?;
        ScaOffline::from_clustering(clustering, &self.stiffness, &self.reference)
    }
}

/// One sample per `(k, eps)` pair, cluster counts outermost.
pub fn generate_samples(
    problem: &ScaProblem,
    ks: &[usize],
    strains: &[f64],
    seed: u64,
    exec: Exec,
) -> Result<Vec<TrainingSample>> {
    let offline: Vec<Result<ScaOffline>> = exec.map_slice(ks, |&k| problem.offline(k, seed));
    let mut out = Vec::with_capacity(ks.len() * strains.len());
    for off in offline {
        let off = off?;
        for &eps in strains {
            out.push(TrainingSample::from_sca(&off, eps)?);
        }
    }
    Ok(out)
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}
