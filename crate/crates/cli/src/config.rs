//! TOML experiment configuration. Every field has a default, so an empty
//! file reproduces the reference experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scakernel::data::{linspace, StiffnessSpec};
use scakernel::gkn::GknConfig;
use scakernel::grid::{Domain1D, Grid1D, PiecewiseConstantField};
use scakernel::spectral::{default_fno_training, FnoConfig};
use scakernel::train::TrainConfig;

use crate::error::{CliError, Result};

/// Overrides the configured output directory.
pub const OUTPUT_ROOT_ENV: &str = "SCAKERNEL_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub domain: DomainConfig,
    /// Material points on the training domain.
    pub n: usize,
    pub stiffness: StiffnessSpec,
    pub strains: StrainConfig,
    pub cluster_counts: Vec<usize>,
    pub gkn: GknConfig,
    pub gkn_training: TrainConfig,
    pub fno: FnoConfig,
    pub fno_n: usize,
    pub fno_training: TrainConfig,
    pub sweep: SweepConfig,
    pub eval: EvalConfig,
    pub smooth: SmoothConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub a: f64,
    pub b: f64,
}

/// Training strains: `levels` evenly spaced values in `[min, max]`; the
/// levels at `held_out` form the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrainConfig {
    pub min: f64,
    pub max: f64,
    pub levels: usize,
    pub held_out: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Radii of influence in domain length units.
    pub radii: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeCase {
    /// Interface coordinate on the training domain.
    pub split: f64,
    pub k_left: usize,
    pub k_right: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluation strains; those outside the training range are reported as
    /// extrapolation.
    pub strains: Vec<f64>,
    pub k: usize,
    pub invariance_ks: Vec<usize>,
    pub domain_lengths: Vec<f64>,
    /// Material points on the extended domains.
    pub extension_n: usize,
    pub composite: Vec<CompositeCase>,
    pub composite_strain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothConfig {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
    pub ks: Vec<f64>,
    pub delta: f64,
    pub probe_n: usize,
    /// Dense samples written per `k`.
    pub sample_n: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            domain: DomainConfig { a: 0.0, b: 10.0 },
            n: 16384,
            stiffness: StiffnessSpec::InverseQuadratic,
            strains: StrainConfig::default(),
            cluster_counts: vec![2, 4, 8, 16, 32, 64],
            gkn: GknConfig::default(),
            gkn_training: TrainConfig::default(),
            fno: FnoConfig::default(),
            fno_n: 256,
            fno_training: default_fno_training(),
            sweep: SweepConfig::default(),
            eval: EvalConfig::default(),
            smooth: SmoothConfig::default(),
        }
    }
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self { a: 0.0, b: 10.0 }
    }
}

impl Default for StrainConfig {
    fn default() -> Self {
        Self {
            min: 0.05,
            max: 0.35,
            levels: 11,
            held_out: vec![1, 5, 9],
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            radii: vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            strains: vec![0.13, 0.26, 0.39],
            k: 33,
            invariance_ks: vec![33, 300],
            domain_lengths: vec![500.0, 1000.0],
            extension_n: 16384,
            composite: vec![
                CompositeCase {
                    split: 5.0,
                    k_left: 16,
                    k_right: 300,
                },
                CompositeCase {
                    split: 5.0,
                    k_left: 32,
                    k_right: 600,
                },
            ],
            composite_strain: 0.2,
        }
    }
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            breakpoints: vec![0.0, 0.2, 0.45, 0.7, 1.0],
            values: vec![1.0, -2.0, 3.5, 0.5],
            ks: vec![10.0, 100.0, 1000.0, 10000.0],
            delta: 0.01,
            probe_n: 20001,
            sample_n: 1001,
        }
    }
}

fn fail<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Config(msg.into()))
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        fail(msg())
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// `$SCAKERNEL_OUTPUT_ROOT` if set, else `output_dir`.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => self.output_dir.clone(),
        }
    }

    pub fn domain(&self) -> Domain1D {
        Domain1D::new(self.domain.a, self.domain.b).expect("validated domain")
    }

    pub fn strain_levels(&self) -> Vec<f64> {
        linspace(self.strains.min, self.strains.max, self.strains.levels)
    }

    /// `(train, test)` strains.
    pub fn strain_split(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut train, mut test) = (vec![], vec![]);
        for (i, e) in self.strain_levels().into_iter().enumerate() {
            if self.strains.held_out.contains(&i) {
                test.push(e)
            } else {
                train.push(e)
            }
        }
        (train, test)
    }

    pub fn in_training_range(&self, eps: f64) -> bool {
        eps >= self.strains.min && eps <= self.strains.max
    }

    /// Fails on the first violated precondition; runs before any compute.
    pub fn validate(&self) -> Result<()> {
        let d = Domain1D::new(self.domain.a, self.domain.b)
            .map_err(|e| CliError::Config(e.to_string()))?;
        check(self.n >= 2, || {
            format!("n must be at least 2, got {}", self.n)
        })?;
        let grid = Grid1D::uniform(d, self.n).map_err(|e| CliError::Config(e.to_string()))?;
        let c = self
            .stiffness
            .field(&grid)
            .map_err(|e| CliError::Config(format!("stiffness: {e}")))?;
        check(c.values().iter().all(|&v| v > 0.0 && v.is_finite()), || {
            "stiffness must be positive and finite".into()
        })?;

        let s = &self.strains;
        check(
            s.min.is_finite() && s.max.is_finite() && s.min <= s.max,
            || format!("strain range [{}, {}] is invalid", s.min, s.max),
        )?;
        check(s.levels >= 1, || {
            "at least one strain level is required".into()
        })?;
        check(s.held_out.iter().all(|&i| i < s.levels), || {
            format!(
                "held-out indices {:?} exceed {} levels",
                s.held_out, s.levels
            )
        })?;
        check(s.held_out.len() < s.levels, || {
            "every strain level is held out".into()
        })?;

        check(!self.cluster_counts.is_empty(), || {
            "cluster_counts is empty".into()
        })?;
        check(
            self.cluster_counts.iter().all(|&k| k >= 1 && k <= self.n),
            || {
                format!(
                    "cluster counts {:?} must lie in [1, n]",
                    self.cluster_counts
                )
            },
        )?;

        self.gkn
            .validate()
            .map_err(|e| CliError::Config(format!("gkn: {e}")))?;
        self.gkn_training
            .validate()
            .map_err(|e| CliError::Config(format!("gkn_training: {e}")))?;
        self.fno
            .validate()
            .map_err(|e| CliError::Config(format!("fno: {e}")))?;
        self.fno_training
            .validate()
            .map_err(|e| CliError::Config(format!("fno_training: {e}")))?;
        check(self.fno_n >= 2 * self.fno.m_max, || {
            format!(
                "fno_n = {} is below 2 m_max = {}",
                self.fno_n,
                2 * self.fno.m_max
            )
        })?;

        let len = d.length();
        check(!self.sweep.radii.is_empty(), || {
            "sweep radius list is empty".into()
        })?;
        check(
            self.sweep.radii.iter().all(|&r| r > 0.0 && r <= len),
            || format!("sweep radii {:?} must lie in (0, {len}]", self.sweep.radii),
        )?;

        let e = &self.eval;
        check(
            !e.strains.is_empty() && e.strains.iter().all(|v| v.is_finite()),
            || "eval strains must be finite and nonempty".into(),
        )?;
        check(e.k >= 1 && e.k <= self.n, || {
            format!("eval k = {} must lie in [1, n]", e.k)
        })?;
        check(
            e.invariance_ks.iter().all(|&k| k >= 1 && k <= self.n),
            || format!("invariance ks {:?} must lie in [1, n]", e.invariance_ks),
        )?;
        check(
            e.domain_lengths.iter().all(|&l| l > 0.0 && l.is_finite()),
            || "domain lengths must be positive".into(),
        )?;
        check(e.extension_n >= e.k, || {
            format!("extension_n = {} is below eval k", e.extension_n)
        })?;
        check(e.composite_strain.is_finite(), || {
            "composite strain must be finite".into()
        })?;
        for c in &e.composite {
            check(c.split > d.a() && c.split < d.b(), || {
                format!("composite split {} lies outside the domain", c.split)
            })?;
            check(
                c.k_left >= 1 && c.k_right >= 1 && c.k_left + c.k_right <= self.n,
                || format!("composite counts {}|{} are invalid", c.k_left, c.k_right),
            )?;
        }

        let sm = &self.smooth;
        PiecewiseConstantField::new(sm.breakpoints.clone(), sm.values.clone())
            .map_err(|e| CliError::Config(format!("smooth: {e}")))?;
        check(
            !sm.ks.is_empty() && sm.ks.iter().all(|&k| k > 0.0 && k.is_finite()),
            || "smooth ks must be positive".into(),
        )?;
        check(
            sm.delta > 0.0 && sm.probe_n >= 2 && sm.sample_n >= 2,
            || "smooth delta, probe_n and sample_n must be positive".into(),
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_experiment() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.n, 16384);
        let (train, test) = cfg.strain_split();
        assert_eq!((train.len(), test.len()), (8, 3));
        assert_eq!(
            train.len() * cfg.cluster_counts.len() + test.len() * cfg.cluster_counts.len(),
            66
        );
        assert!((test[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn round_trips_and_hash_is_stable() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 3\n[gkn]\nradius = 0.3\n[gkn_training.adam]\nlr = 0.005\n",
        )
        .unwrap();
        assert_eq!(cfg.gkn.radius, 0.3);
        assert_eq!(cfg.gkn_training.adam.lr, 0.005);
        assert_eq!(cfg.gkn_training.adam.beta2, 0.999);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn rejects_precondition_violations() {
        for bad in [
            "n = 1",
            "[domain]\na = 1.0\nb = 0.0",
            "cluster_counts = []",
            "cluster_counts = [0]",
            "[strains]\nheld_out = [11]",
            "[gkn]\nradius = 1.5",
            "[gkn_training]\nbatch_size = 0",
            "fno_n = 16",
            "[sweep]\nradii = [20.0]",
            "[eval]\ncomposite = [{ split = 12.0, k_left = 2, k_right = 2 }]",
            "[smooth]\nbreakpoints = [0.0, 1.0]\nvalues = [1.0, 2.0]",
            "[stiffness]\nkind = \"constant\"\nvalue = -1.0",
            "unknown_key = 1",
        ] {
            assert!(ExperimentConfig::from_toml(bad).is_err(), "{bad}");
        }
    }
}
