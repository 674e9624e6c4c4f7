//! Subcommands: each reads the config, writes into its own directory under
//! the output root and finishes with a manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scakernel::gkn::{GknModel, TrainingSample};
use scakernel::spectral::{predict_fno, FnoModel};
use scakernel::train::EpochRecord;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result, StageExt};
use crate::experiments::{
    evaluate_samples, fno_dataset, normalized_radius, reconstructed_pair, scenario_samples,
    smoothing_demo, sweep_radius, sweep_radius_checkpoints, train_fno_model, train_gkn_model,
    training_problem, EvalRow, FnoDataset, GknDataset, Scenario, SweepRow, EVAL_HEADER,
};
use crate::manifest::{write_atomic, RunManifest, StageDir};

pub const DATA_DIR: &str = "data";
pub const GKN_INDEX: &str = "index.json";
pub const FNO_DATA: &str = "fno.json";
pub const CHECKPOINT: &str = "checkpoint.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gkn,
    Fno,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gkn => "gkn",
            ModelKind::Fno => "fno",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub k: usize,
    pub eps_macro: f64,
    pub split: String,
    pub shard: String,
}

/// `data/index.json`: shard listing plus the samples the trainers consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config_hash: String,
    pub concentration_method: scakernel::data::ConcentrationMethod,
    pub entries: Vec<IndexEntry>,
    pub dataset: GknDataset,
}

fn eps_tag(eps: f64) -> String {
    format!("{eps:.4}")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingInput {
        path: path.to_path_buf(),
        hint: hint.to_string(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn history_rows(history: &[EpochRecord]) -> impl Iterator<Item = Vec<String>> + '_ {
    history.iter().map(|r| {
        vec![
            r.epoch.to_string(),
            format!("{:e}", r.train_loss),
            r.test_loss.map(|t| format!("{t:e}")).unwrap_or_default(),
        ]
    })
}

/// Clusterings, interaction tensors, clustered and full-field strains per
/// `(K, eps)`, the training index and the full-field operator dataset.
pub fn cmd_generate_data(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut st = StageDir::create(&cfg.output_root(), DATA_DIR)?;
    let problem = st.timed("offline", |_| training_problem(cfg))?;
    let (train_strains, _) = cfg.strain_split();
    let mut entries = vec![];
    let mut dataset = GknDataset {
        train: vec![],
        test: vec![],
    };
    st.timed("shards", |st| {
        for &k in &cfg.cluster_counts {
            let off = problem.offline(k, cfg.seed).stage("generate-data")?;
            let dir = format!("k{k}");
            st.write(
                &format!("{dir}/clustering.json"),
                off.clustering.to_json().stage("generate-data")?.as_bytes(),
            )?;
            let mut d = Vec::new();
            off.interaction.write_csv(&mut d).stage("generate-data")?;
            st.write(&format!("{dir}/interaction.csv"), &d)?;
            for eps in cfg.strain_levels() {
                let (sca, full) = reconstructed_pair(&problem, &off, eps)?;
                let sol = off.solve(eps).stage("generate-data")?;
                let shard = format!("{dir}/eps{}.csv", eps_tag(eps));
                let rows = problem
                    .grid()
                    .points()
                    .iter()
                    .zip(&sca)
                    .zip(&full)
                    .map(|((x, s), f)| vec![format!("{x:e}"), format!("{s:e}"), format!("{f:e}")]);
                st.write_csv(&shard, &["x", "strain_sca", "strain_ref"], rows)?;
                st.write_csv(
                    &format!("{dir}/eps{}_clusters.csv", eps_tag(eps)),
                    &["cluster", "centroid", "volume_fraction", "strain"],
                    (0..k).map(|i| {
                        vec![
                            i.to_string(),
                            format!("{:e}", off.clustering.centroids()[i]),
                            format!("{:e}", off.clustering.volume_fractions()[i]),
                            format!("{:e}", sol.eps[i]),
                        ]
                    }),
                )?;
                let sample = TrainingSample::from_sca(&off, eps).stage("generate-data")?;
                let split = if train_strains.contains(&eps) {
                    dataset.train.push(sample);
                    "train"
                } else {
                    dataset.test.push(sample);
                    "test"
                };
                entries.push(IndexEntry {
                    k,
                    eps_macro: eps,
                    split: split.into(),
                    shard,
                });
            }
        }
        Ok(())
    })?;
    let index = DatasetIndex {
        config_hash: cfg.hash(),
        concentration_method: problem.concentration_method,
        entries,
        dataset,
    };
    st.write_json(GKN_INDEX, &index)?;
    let fno = st.timed("full_field", |_| fno_dataset(cfg))?;
    st.write_json(FNO_DATA, &fno)?;
    st.finish(cfg)
}

pub fn load_gkn_dataset(cfg: &ExperimentConfig) -> Result<GknDataset> {
    let path = cfg.output_root().join(DATA_DIR).join(GKN_INDEX);
    let index: DatasetIndex = read_json(&path, "run generate-data first")?;
    if index.config_hash != cfg.hash() {
        eprintln!(
            "warning: dataset at {} was generated from a different config",
            path.display()
        );
    }
    Ok(index.dataset)
}

pub fn load_fno_dataset(cfg: &ExperimentConfig) -> Result<FnoDataset> {
    read_json(
        &cfg.output_root().join(DATA_DIR).join(FNO_DATA),
        "run generate-data first",
    )
}

/// Checkpoint and `epoch,train_loss,test_loss` history. The full-field model
/// also writes `x,strain_pred,strain_ref` per held-out strain.
pub fn cmd_train(cfg: &ExperimentConfig, kind: ModelKind) -> Result<RunManifest> {
    let mut st = StageDir::create(&cfg.output_root(), &format!("train_{}", kind.as_str()))?;
    let history = match kind {
        ModelKind::Gkn => {
            let data = load_gkn_dataset(cfg)?;
            let (model, history) = st.timed("train", |_| train_gkn_model(cfg, &data, None))?;
            st.write(CHECKPOINT, model.to_json().stage("train")?.as_bytes())?;
            history
        }
        ModelKind::Fno => {
            let data = load_fno_dataset(cfg)?;
            let (model, history) = st.timed("train", |_| train_fno_model(cfg, &data))?;
            st.write(CHECKPOINT, model.to_json().stage("train")?.as_bytes())?;
            for s in &data.test {
                let pred = predict_fno(&model, s).stage("train")?;
                let rows = pred
                    .grid()
                    .points()
                    .iter()
                    .zip(pred.values())
                    .zip(&s.target)
                    .map(|((x, p), r)| vec![format!("{x:e}"), format!("{p:e}"), format!("{r:e}")]);
                st.write_csv(
                    &format!("predictions_eps{}.csv", eps_tag(s.eps_macro)),
                    &["x", "strain_pred", "strain_ref"],
                    rows,
                )?;
            }
            history
        }
    };
    st.write_csv(
        "loss_history.csv",
        &["epoch", "train_loss", "test_loss"],
        history_rows(&history),
    )?;
    st.finish(cfg)
}

pub fn default_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_root().join("train_gkn").join(CHECKPOINT)
}

pub fn load_gkn_checkpoint(path: &Path) -> Result<GknModel> {
    let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingInput {
        path: path.to_path_buf(),
        hint: "train a gkn model first".into(),
    })?;
    GknModel::from_json(&text).stage("eval")
}

pub fn load_fno_checkpoint(path: &Path) -> Result<FnoModel> {
    let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingInput {
        path: path.to_path_buf(),
        hint: "train an fno model first".into(),
    })?;
    FnoModel::from_json(&text).stage("eval")
}

/// SCA references for a scenario, cached under `cache/<config hash>/`.
fn cached_scenario_samples(
    cfg: &ExperimentConfig,
    problem: &scakernel::data::ScaProblem,
    scenario: Scenario,
) -> Result<Vec<TrainingSample>> {
    let path = cfg
        .output_root()
        .join("cache")
        .join(cfg.hash())
        .join(format!("{scenario}.json"));
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(samples) = serde_json::from_str(&text) {
            return Ok(samples);
        }
    }
    let samples = scenario_samples(cfg, problem, scenario)?;
    write_atomic(&path, serde_json::to_string(&samples)?.as_bytes())?;
    Ok(samples)
}

/// `scenario,K,eps_macro,domain_len,rel_l2` per scenario.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    scenarios: &[Scenario],
) -> Result<(RunManifest, Vec<EvalRow>)> {
    let model = load_gkn_checkpoint(checkpoint)?;
    let mut st = StageDir::create(&cfg.output_root(), "eval")?;
    let problem = st.timed("offline", |_| training_problem(cfg))?;
    let mut all = vec![];
    for &sc in scenarios {
        let rows = st.timed(sc.as_str(), |_| {
            let samples = cached_scenario_samples(cfg, &problem, sc)?;
            evaluate_samples(&model, sc, &samples)
        })?;
        st.write_csv(
            &format!("{sc}.csv"),
            &EVAL_HEADER,
            rows.iter().map(EvalRow::fields),
        )?;
        all.extend(rows);
    }
    Ok((st.finish(cfg)?, all))
}

/// `r,l2_loss` per radius; trains unless `checkpoints` holds `gkn_r<r>.json`
/// files from an earlier sweep.
pub fn cmd_sweep_radius(
    cfg: &ExperimentConfig,
    checkpoints: Option<&Path>,
) -> Result<(RunManifest, Vec<SweepRow>)> {
    let data = load_gkn_dataset(cfg)?;
    let mut st = StageDir::create(&cfg.output_root(), "sweep_radius")?;
    let name = |r: f64| format!("gkn_r{r}.json");
    let rows = match checkpoints {
        Some(dir) => st.timed("evaluate", |_| {
            Ok(sweep_radius_checkpoints(cfg, &data, |r| {
                load_gkn_checkpoint(&dir.join(name(r)))
            }))
        })?,
        None => {
            let mut saved = vec![];
            let rows = st.timed("train", |_| {
                Ok(sweep_radius(cfg, &data, |r, m| {
                    saved.push((name(r), m.to_json().stage("sweep-radius")?));
                    Ok(())
                }))
            })?;
            for (file, json) in saved {
                st.write(&file, json.as_bytes())?;
            }
            rows
        }
    };
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "warning: radius {} failed: {}",
            r.r,
            r.error.as_deref().unwrap_or_default()
        );
    }
    st.write_csv(
        "table.csv",
        &["r", "l2_loss", "r_relative"],
        rows.iter().map(|r| {
            vec![
                r.r.to_string(),
                r.l2_loss
                    .map(|l| format!("{l:e}"))
                    .unwrap_or_else(|| "nan".into()),
                normalized_radius(cfg, r.r).to_string(),
            ]
        }),
    )?;
    st.write_json(
        "failures.json",
        &rows
            .iter()
            .filter(|r| r.error.is_some())
            .collect::<Vec<_>>(),
    )?;
    Ok((st.finish(cfg)?, rows))
}

/// Dense samples of the field and its smoothings, plus the error table.
pub fn cmd_smooth_demo(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut st = StageDir::create(&cfg.output_root(), "smooth_demo")?;
    let demo = st.timed("build", |_| smoothing_demo(cfg))?;
    let d = demo.phi.domain();
    let n = cfg.smooth.sample_n;
    let xs: Vec<f64> = (0..n)
        .map(|i| d.a() + d.length() * i as f64 / (n - 1) as f64)
        .collect();
    for (a, row) in demo.approximations.iter().zip(&demo.table) {
        let rows = xs
            .iter()
            .map(|&x| {
                Ok(vec![
                    format!("{x:e}"),
                    format!("{:e}", demo.phi.eval(x)?),
                    format!("{:e}", a.evaluate(x)?),
                ])
            })
            .collect::<scakernel::Result<Vec<_>>>()
            .stage("smooth-demo")?;
        st.write_csv(
            &format!("samples_k{}.csv", row.k),
            &["x", "phi", "approx"],
            rows,
        )?;
    }
    st.write_csv(
        "errors.csv",
        &["k", "sup_error", "max_midpoint_jump"],
        demo.table.iter().map(|r| {
            vec![
                r.k.to_string(),
                format!("{:e}", r.sup_error),
                format!("{:e}", r.max_midpoint_jump),
            ]
        }),
    )?;
    st.finish(cfg)
}
