//! Experiment harness and CLI for the meta-learning engine: experiment
//! configuration and orchestration, sweeps, accuracy curves, the
//! analytic verifiers, and all on-disk formats (PGM datasets,
//! checkpoints, CSV metrics, SVG plots).

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod pgm;
pub mod run;
pub mod svg;
pub mod workers;

#[derive(Parser)]
#[command(name = "umtra", about = "Unsupervised meta-learning experiment harness", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (overrides UMTRA_WORKERS; defaults to the
    /// available parallelism). Results never depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config (meta-train + evaluate).
    MetaTrain { config: PathBuf },
    /// Closed-form distinct-class probability, optionally checked by
    /// Monte-Carlo simulation.
    Collision {
        c: u64,
        m: u64,
        n_way: u64,
        /// Also run this many Monte-Carlo trials.
        #[arg(long)]
        mc: Option<u64>,
    },
    /// Run a hyperparameter grid over a base config.
    Sweep { config: PathBuf, grid: PathBuf },
    /// Per-step target-training accuracy curves for one or more
    /// checkpoints ("scratch" evaluates a fresh initialization).
    Curve {
        config: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<String>,
    },
    /// Monte-Carlo bias-variance decomposition on a toy regression
    /// spec.
    Biasvar { toy: PathBuf },
    /// Consolidated comparison table across finished run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where to write report.csv and report.txt.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let workers = workers::resolve_workers(cli.workers);
    match cli.command {
        Command::MetaTrain { config } => commands::cmd_meta_train(&config, workers),
        Command::Collision { c, m, n_way, mc } => commands::cmd_collision(c, m, n_way, mc),
        Command::Sweep { config, grid } => commands::cmd_sweep(&config, &grid, workers),
        Command::Curve { config, checkpoints } => commands::cmd_curve(&config, &checkpoints, workers),
        Command::Biasvar { toy } => commands::cmd_biasvar(&toy),
        Command::Report { dirs, out } => commands::cmd_report(&dirs, &out),
    }
}
