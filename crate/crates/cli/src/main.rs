//! Batch front-end for the curriculum preference optimization laboratory:
//! generate a synthetic dataset, score and partition it, train a tabular
//! policy through the curriculum, evaluate the stage snapshots and emit
//! trajectory reports.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use scpo_core::trainer::OrderMode;

const LONG_ABOUT: &str = "\
All artifacts live in a run directory and every command rewrites the \
directory manifest, so a command re-run with the same config and seed is \
byte-identical (compare manifest.txt).

Defaults: beta = beta1 = beta2 = 0.1, lambda = 0.2, batch size 32, one epoch \
per stage, stage proportions 0.25/0.40/0.35. The learning rate defaults to \
1e-2, sized for exact tabular policies; gradient-based fine-tuning of large \
models runs orders of magnitude lower (~5e-7).

All randomness derives from the single --seed (or `seed` in the config \
file) via per-domain substreams.";

#[derive(Parser)]
#[command(name = "scpo", about = "Curriculum preference optimization laboratory", long_about = LONG_ABOUT, version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that holds every artifact of this run.
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
    /// Root seed for all randomness (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic preference dataset.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score pair difficulty and cut the easy/medium/hard curriculum.
    Score {
        #[command(flatten)]
        common: CommonArgs,
        /// Policy used for the uncertainty metric (default: uniform).
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Alias of `score`: writes the same difficulty report and plan file.
    Partition {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Train the curriculum and write per-stage policy snapshots and traces.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Initial policy (default: uniform over the dataset contexts).
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Stage traversal order; overrides the plan file and is written
        /// back to it.
        #[arg(long, value_parser = parse_order)]
        order: Option<OrderMode>,
        /// Comma-separated symmetry-loss weights; one run subdirectory per
        /// value.
        #[arg(long, value_delimiter = ',')]
        lambda_sweep: Option<Vec<f64>>,
        /// Comma-separated medium-stage proportions; the easy share stays
        /// fixed and the hard stage absorbs the rest.
        #[arg(long, value_delimiter = ',')]
        medium_sweep: Option<Vec<f64>>,
    },
    /// Evaluate the stage snapshots on the full pair set.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// CSV with header `chair,cover` and one percentage line; enables
        /// the composite generative score in the report.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Merge evaluation reports into a stage-trajectory CSV.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// Additional run directories to include (default: --run-dir only).
        #[arg(long, value_delimiter = ',')]
        runs: Option<Vec<PathBuf>>,
    },
}

fn parse_order(text: &str) -> Result<OrderMode, String> {
    match text {
        "forward" => Ok(OrderMode::Forward),
        "reversed" => Ok(OrderMode::Reversed),
        other => Err(format!("unknown order {other:?} (expected forward or reversed)")),
    }
}

fn load(common: &CommonArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { common } => {
            let config = load(&common)?;
            commands::gen_data(&config, &common.run_dir)
        }
        Command::Score { common, policy } | Command::Partition { common, policy } => {
            let config = load(&common)?;
            commands::score(&config, &common.run_dir, policy.as_deref())
        }
        Command::Train { common, policy, order, lambda_sweep, medium_sweep } => {
            let config = load(&common)?;
            if let Some(values) = &lambda_sweep {
                if values.is_empty() {
                    bail!("--lambda-sweep needs at least one value");
                }
            }
            if let Some(values) = &medium_sweep {
                if values.is_empty() {
                    bail!("--medium-sweep needs at least one value");
                }
            }
            commands::train(
                &config,
                &common.run_dir,
                &commands::TrainArgs {
                    policy_path: policy.as_deref(),
                    order,
                    lambda_sweep,
                    medium_sweep,
                },
            )
        }
        Command::Eval { common, metrics } => {
            let config = load(&common)?;
            commands::eval(&config, &common.run_dir, metrics.as_deref())
        }
        Command::Report { common, runs } => {
            let config = load(&common)?;
            let mut dirs: Vec<&std::path::Path> = vec![&common.run_dir];
            let extra = runs.unwrap_or_default();
            dirs.extend(extra.iter().map(|p| p.as_path()));
            commands::report(&config, &common.run_dir, &dirs)
        }
    }
}
