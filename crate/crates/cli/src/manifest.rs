//! Stage output directories, atomic writes and run manifests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the stage directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<FileEntry>,
    pub timings: Vec<StageTiming>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            std::fs::read_to_string(&path).map_err(|source| CliError::Io { path, source })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checksums of every listed file, for comparing reruns.
    pub fn checksums(&self) -> Vec<(&str, &str)> {
        self.files
            .iter()
            .map(|f| (f.path.as_str(), f.sha256.as_str()))
            .collect()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|source| CliError::Io {
        path: tmp.clone(),
        source,
    })?;
    std::fs::rename(&tmp, path).map_err(io)
}

/// CSV text from a header and rows of already formatted fields.
pub fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| CliError::Io {
        path: PathBuf::from("<csv buffer>"),
        source: e.into_error(),
    })
}

/// Collects the files one command writes into its directory and emits the
/// manifest listing them.
pub struct StageDir {
    dir: PathBuf,
    command: String,
    files: Vec<FileEntry>,
    timings: Vec<StageTiming>,
}

impl StageDir {
    /// Creates `root/name`, removing a manifest left by an earlier run so a
    /// partial rerun is never mistaken for a complete one.
    pub fn create(root: &Path, name: &str) -> Result<Self> {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        let old = dir.join(MANIFEST_FILE);
        if old.exists() {
            std::fs::remove_file(&old).map_err(|source| CliError::Io { path: old, source })?;
        }
        Ok(Self {
            dir,
            command: name.to_string(),
            files: vec![],
            timings: vec![],
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        write_atomic(&path, bytes)?;
        self.files.retain(|f| f.path != rel);
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(rel, text.as_bytes())
    }

    pub fn write_csv<I, R>(&mut self, rel: &str, header: &[&str], rows: I) -> Result<PathBuf>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let bytes = csv_bytes(header, rows)?;
        self.write(rel, &bytes)
    }

    /// Runs `f`, recording its wall-clock time under `name`.
    pub fn timed<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f(self)?;
        self.timings.push(StageTiming {
            name: name.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    pub fn finish(mut self, cfg: &ExperimentConfig) -> Result<RunManifest> {
        self.write("config.toml", cfg.to_toml().as_bytes())?;
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            files: self.files,
            timings: self.timings,
            config: cfg.clone(),
        };
        write_atomic(
            &self.dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        Ok(manifest)
    }
}
