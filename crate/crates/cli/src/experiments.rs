//! Dataset construction, training and evaluation sweeps, free of file IO.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use scakernel::data::{generate_samples, ConcentrationMethod, ScaProblem};
use scakernel::gkn::{mean_relative_error, train_gkn, GknConfig, GknModel, TrainingSample};
use scakernel::grid::{Domain1D, Grid1D, PiecewiseConstantField};
use scakernel::ls::{
    analytic_solution, solve_full_field, LSSolution, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use scakernel::sca::{reconstruct_field, ScaOffline};
use scakernel::smoothing::{sup_error_outside, SmoothApprox};
use scakernel::spectral::{train_fno, FieldSample, FnoModel};
use scakernel::train::EpochRecord;
use scakernel::Exec;

use crate::config::{CompositeCase, ExperimentConfig};
use crate::error::{CliError, Result, StageExt};

/// Offline problem on the training domain.
pub fn training_problem(cfg: &ExperimentConfig) -> Result<ScaProblem> {
    ScaProblem::new(cfg.domain(), cfg.n, &cfg.stiffness).stage("offline")
}

/// Full-field reference, by fixed point where the offline stage used it and
/// by the closed form otherwise.
pub fn full_field_reference(problem: &ScaProblem, eps: f64) -> scakernel::Result<LSSolution> {
    match problem.concentration_method {
        ConcentrationMethod::FixedPoint => solve_full_field(
            &problem.stiffness,
            eps,
            &problem.reference,
            DEFAULT_TOL,
            DEFAULT_MAX_ITER,
        ),
        ConcentrationMethod::ClosedForm => analytic_solution(&problem.stiffness, eps),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GknDataset {
    pub train: Vec<TrainingSample>,
    pub test: Vec<TrainingSample>,
}

/// One sample per (cluster count, strain level), split by held-out level.
pub fn gkn_dataset(cfg: &ExperimentConfig, problem: &ScaProblem) -> Result<GknDataset> {
    let (train, test) = cfg.strain_split();
    let exec = Exec::default();
    Ok(GknDataset {
        train: generate_samples(problem, &cfg.cluster_counts, &train, cfg.seed, exec)
            .stage("generate-data")?,
        test: generate_samples(problem, &cfg.cluster_counts, &test, cfg.seed, exec)
            .stage("generate-data")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnoDataset {
    pub train: Vec<FieldSample>,
    pub test: Vec<FieldSample>,
}

/// Full-field pairs on an `fno_n` grid at every strain level.
pub fn fno_dataset(cfg: &ExperimentConfig) -> Result<FnoDataset> {
    let grid = Grid1D::uniform(cfg.domain(), cfg.fno_n).stage("generate-data")?;
    let c = cfg.stiffness.field(&grid).stage("generate-data")?;
    let problem =
        ScaProblem::new(cfg.domain(), cfg.fno_n, &cfg.stiffness).stage("generate-data")?;
    let (train, test) = cfg.strain_split();
    let make = |strains: Vec<f64>| -> Result<Vec<FieldSample>> {
        strains
            .into_iter()
            .map(|e| {
                let sol = full_field_reference(&problem, e)?;
                FieldSample::new(
                    cfg.domain(),
                    c.values().to_vec(),
                    e,
                    sol.strain.into_values(),
                )
            })
            .collect::<scakernel::Result<_>>()
            .stage("generate-data")
    };
    Ok(FnoDataset {
        train: make(train)?,
        test: make(test)?,
    })
}

/// Fresh model from the config seed, trained on `data`. `radius` overrides
/// the configured normalized radius.
pub fn train_gkn_model(
    cfg: &ExperimentConfig,
    data: &GknDataset,
    radius: Option<f64>,
) -> Result<(GknModel, Vec<EpochRecord>)> {
    let gkn = GknConfig {
        radius: radius.unwrap_or(cfg.gkn.radius),
        ..cfg.gkn.clone()
    };
    let model = GknModel::init(gkn, cfg.seed).stage("train")?;
    let train_cfg = scakernel::train::TrainConfig {
        seed: cfg.seed,
        ..cfg.gkn_training.clone()
    };
    train_gkn(model, &data.train, &data.test, &train_cfg).stage("train")
}

pub fn train_fno_model(
    cfg: &ExperimentConfig,
    data: &FnoDataset,
) -> Result<(FnoModel, Vec<EpochRecord>)> {
    let model = FnoModel::init(cfg.fno.clone(), cfg.seed).stage("train")?;
    let train_cfg = scakernel::train::TrainConfig {
        seed: cfg.seed,
        ..cfg.fno_training.clone()
    };
    train_fno(model, &data.train, &data.test, &train_cfg).stage("train")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    InRange,
    ExtrapolateStrain,
    Invariance,
    DomainExtension,
    Composite,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::InRange,
        Scenario::ExtrapolateStrain,
        Scenario::Invariance,
        Scenario::DomainExtension,
        Scenario::Composite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::InRange => "in_range",
            Scenario::ExtrapolateStrain => "extrapolate_strain",
            Scenario::Invariance => "invariance",
            Scenario::DomainExtension => "domain_extension",
            Scenario::Composite => "composite",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| format!("unknown scenario {s}; expected one of in_range, extrapolate_strain, invariance, domain_extension, composite"))
    }
}

/// SCA references for one scenario. Strains outside the training range only
/// appear in the extrapolation scenario.
pub fn scenario_samples(
    cfg: &ExperimentConfig,
    problem: &ScaProblem,
    scenario: Scenario,
) -> Result<Vec<TrainingSample>> {
    let e = &cfg.eval;
    let (inside, outside): (Vec<f64>, Vec<f64>) =
        e.strains.iter().partition(|&&s| cfg.in_training_range(s));
    let stage = scenario.as_str();
    let at = |off: &ScaOffline, strains: &[f64]| -> Result<Vec<TrainingSample>> {
        strains
            .iter()
            .map(|&s| TrainingSample::from_sca(off, s))
            .collect::<scakernel::Result<_>>()
            .stage(stage)
    };
    match scenario {
        Scenario::InRange => at(&problem.offline(e.k, cfg.seed).stage(stage)?, &inside),
        Scenario::ExtrapolateStrain => at(&problem.offline(e.k, cfg.seed).stage(stage)?, &outside),
        Scenario::Invariance => generate_samples(
            problem,
            &e.invariance_ks,
            &inside,
            cfg.seed,
            Exec::default(),
        )
        .stage(stage),
        Scenario::DomainExtension => {
            let mut out = vec![];
            for &len in &e.domain_lengths {
                let d = Domain1D::new(cfg.domain.a, cfg.domain.a + len).stage(stage)?;
                let p = ScaProblem::new(d, e.extension_n, &cfg.stiffness).stage(stage)?;
                out.extend(at(&p.offline(e.k, cfg.seed).stage(stage)?, &inside)?);
            }
            Ok(out)
        }
        Scenario::Composite => {
            let mut out = vec![];
            for c in &e.composite {
                out.extend(at(
                    &composite_offline(cfg, problem, c)?,
                    &[e.composite_strain],
                )?);
            }
            Ok(out)
        }
    }
}

pub fn composite_offline(
    cfg: &ExperimentConfig,
    problem: &ScaProblem,
    case: &CompositeCase,
) -> Result<ScaOffline> {
    problem
        .offline_composite(case.split, case.k_left, case.k_right, cfg.seed)
        .stage("composite")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scenario: Scenario,
    pub k: usize,
    pub eps_macro: f64,
    pub domain_len: f64,
    pub rel_l2: f64,
}

pub const EVAL_HEADER: [&str; 5] = ["scenario", "K", "eps_macro", "domain_len", "rel_l2"];

impl EvalRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.scenario.to_string(),
            self.k.to_string(),
            self.eps_macro.to_string(),
            self.domain_len.to_string(),
            format!("{:e}", self.rel_l2),
        ]
    }
}

pub fn evaluate_samples(
    model: &GknModel,
    scenario: Scenario,
    samples: &[TrainingSample],
) -> Result<Vec<EvalRow>> {
    samples
        .iter()
        .map(|s| {
            let rel_l2 =
                mean_relative_error(model, std::slice::from_ref(s)).stage(scenario.as_str())?;
            Ok(EvalRow {
                scenario,
                k: s.k(),
                eps_macro: s.eps_macro,
                domain_len: s.domain.length(),
                rel_l2,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Radius of influence in domain length units.
    pub r: f64,
    pub l2_loss: Option<f64>,
    pub error: Option<String>,
}

/// Normalized graph radius for a radius in domain length units.
pub fn normalized_radius(cfg: &ExperimentConfig, r: f64) -> f64 {
    r / cfg.domain().length()
}

/// Trains one model per radius and records its held-out loss. Failed runs are
/// recorded and the sweep continues.
pub fn sweep_radius(
    cfg: &ExperimentConfig,
    data: &GknDataset,
    mut on_model: impl FnMut(f64, &GknModel) -> Result<()>,
) -> Vec<SweepRow> {
    cfg.sweep
        .radii
        .iter()
        .map(|&r| {
            let run =
                train_gkn_model(cfg, data, Some(normalized_radius(cfg, r))).and_then(|(m, _)| {
                    on_model(r, &m)?;
                    mean_relative_error(&m, &data.test).stage("sweep-radius")
                });
            match run {
                Ok(l) => SweepRow {
                    r,
                    l2_loss: Some(l),
                    error: None,
                },
                Err(e) => SweepRow {
                    r,
                    l2_loss: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Held-out loss of existing checkpoints, one per radius.
pub fn sweep_radius_checkpoints(
    cfg: &ExperimentConfig,
    data: &GknDataset,
    load: impl Fn(f64) -> Result<GknModel>,
) -> Vec<SweepRow> {
    cfg.sweep
        .radii
        .iter()
        .map(|&r| {
            let run = load(r).and_then(|m| {
                let expected = normalized_radius(cfg, r);
                if (m.config().radius - expected).abs() > 1e-12 {
                    return Err(CliError::Config(format!(
                        "checkpoint for r = {r} has radius {}, expected {expected}",
                        m.config().radius
                    )));
                }
                mean_relative_error(&m, &data.test).stage("sweep-radius")
            });
            match run {
                Ok(l) => SweepRow {
                    r,
                    l2_loss: Some(l),
                    error: None,
                },
                Err(e) => SweepRow {
                    r,
                    l2_loss: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothRow {
    pub k: f64,
    pub sup_error: f64,
    pub max_midpoint_jump: f64,
}

pub struct SmoothDemo {
    pub phi: PiecewiseConstantField,
    pub approximations: Vec<SmoothApprox>,
    pub table: Vec<SmoothRow>,
}

pub fn smoothing_demo(cfg: &ExperimentConfig) -> Result<SmoothDemo> {
    let s = &cfg.smooth;
    let phi = PiecewiseConstantField::new(s.breakpoints.clone(), s.values.clone())
        .stage("smooth-demo")?;
    let mut approximations = vec![];
    let mut table = vec![];
    for &k in &s.ks {
        let a = SmoothApprox::build(&phi, k).stage("smooth-demo")?;
        let sup_error = sup_error_outside(&phi, &a, s.delta, s.probe_n).stage("smooth-demo")?;
        let max_midpoint_jump = a.midpoint_jumps().into_iter().fold(0.0, f64::max);
        table.push(SmoothRow {
            k,
            sup_error,
            max_midpoint_jump,
        });
        approximations.push(a);
    }
    Ok(SmoothDemo {
        phi,
        approximations,
        table,
    })
}

/// Clustered and full-field strain for one offline clustering and strain.
pub fn reconstructed_pair(
    problem: &ScaProblem,
    off: &ScaOffline,
    eps: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sol = off.solve(eps).stage("generate-data")?;
    let sca = reconstruct_field(&off.clustering, &sol).stage("generate-data")?;
    let full = full_field_reference(problem, eps).stage("generate-data")?;
    Ok((sca.into_values(), full.strain.into_values()))
}
