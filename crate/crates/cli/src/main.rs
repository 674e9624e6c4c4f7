use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use scakernel_cli::commands::{
    cmd_eval, cmd_generate_data, cmd_smooth_demo, cmd_sweep_radius, cmd_train, default_checkpoint,
    ModelKind,
};
use scakernel_cli::experiments::Scenario;
use scakernel_cli::manifest::RunManifest;
use scakernel_cli::{CliError, ExperimentConfig, Result};

#[derive(Parser)]
#[command(
    name = "scakernel",
    version,
    about = "Clustered Lippmann-Schwinger experiments and learned interaction operators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Gkn,
    Fno,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    All,
    InRange,
    ExtrapolateStrain,
    Invariance,
    DomainExtension,
    Composite,
}

#[derive(Subcommand)]
enum Command {
    /// SCA samples for every (K, strain) pair plus full-field pairs.
    GenerateData(Common),
    /// Train a graph kernel network or a Fourier operator.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "gkn")]
        model: Kind,
    },
    /// Evaluate a trained graph kernel network on one or all scenarios.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        scenario: ScenarioArg,
    },
    /// Held-out loss as a function of the radius of influence.
    SweepRadius {
        #[command(flatten)]
        common: Common,
        /// Evaluate `gkn_r<r>.json` files from this directory instead of training.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Smoothing of the configured piecewise-constant field.
    SmoothDemo(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(m: &RunManifest, cfg: &ExperimentConfig) {
    println!(
        "{}: {} files in {}",
        m.command,
        m.files.len(),
        cfg.output_root().join(&m.command).display()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(c) => {
            let cfg = load(&c)?;
            report(&cmd_generate_data(&cfg)?, &cfg);
        }
        Command::Train { common, model } => {
            let cfg = load(&common)?;
            let kind = match model {
                Kind::Gkn => ModelKind::Gkn,
                Kind::Fno => ModelKind::Fno,
            };
            report(&cmd_train(&cfg, kind)?, &cfg);
        }
        Command::Eval {
            common,
            checkpoint,
            scenario,
        } => {
            let cfg = load(&common)?;
            let scenarios = match scenario {
                ScenarioArg::All => Scenario::ALL.to_vec(),
                ScenarioArg::InRange => vec![Scenario::InRange],
                ScenarioArg::ExtrapolateStrain => vec![Scenario::ExtrapolateStrain],
                ScenarioArg::Invariance => vec![Scenario::Invariance],
                ScenarioArg::DomainExtension => vec![Scenario::DomainExtension],
                ScenarioArg::Composite => vec![Scenario::Composite],
            };
            let ckpt = checkpoint.unwrap_or_else(|| default_checkpoint(&cfg));
            let (m, rows) = cmd_eval(&cfg, &ckpt, &scenarios)?;
            for r in &rows {
                println!(
                    "{:<20} K={:<4} eps={:<6} L={:<7} rel_l2={:.4e}",
                    r.scenario, r.k, r.eps_macro, r.domain_len, r.rel_l2
                );
            }
            report(&m, &cfg);
        }
        Command::SweepRadius {
            common,
            checkpoints,
        } => {
            let cfg = load(&common)?;
            let (m, rows) = cmd_sweep_radius(&cfg, checkpoints.as_deref())?;
            for r in &rows {
                match r.l2_loss {
                    Some(l) => println!("r={:<5} l2_loss={l:.4e}", r.r),
                    None => println!("r={:<5} failed", r.r),
                }
            }
            report(&m, &cfg);
        }
        Command::SmoothDemo(c) => {
            let cfg = load(&c)?;
            report(&cmd_smooth_demo(&cfg)?, &cfg);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(match e {
                CliError::Config(_) | CliError::Toml(_) => 2,
                _ => 1,
            })
        }
    }
}
