//! Experiment driver: TOML configuration, dataset generation, training,
//! evaluation sweeps and run manifests.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod manifest;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
