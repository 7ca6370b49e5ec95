//! `pla`: dataset generation, progressive and baseline training, retrieval
//! evaluation, a standalone optimizer self-test, and run summaries.

mod commands;
mod config;
mod report;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pla_core::{EmbeddingHead, TrainMode};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "pla",
    version,
    about = "Progressive metric learning on synthetic identity data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every config-driven subcommand. Flags override the file.
#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory. For `eval` it only sets where metrics are written.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset file; defaults to `<out>/dataset.txt`.
    #[arg(long, value_name = "PATH")]
    dataset: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Generator and split seed (overrides `data.seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one mode and write its report and checkpoints to `<out>/<mode>/`.
    Train {
        #[command(flatten)]
        common: Common,
        /// pla, batch_hard, ce_only, triplet_only or composite_fixed.
        #[arg(long, default_value = "pla")]
        mode: TrainMode,
        /// Run seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the query and gallery rows of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Reduce embeddings with PCA to this many dimensions.
        #[arg(long)]
        target_dim: Option<usize>,
        /// concat, triplet or softmax.
        #[arg(long)]
        embedding: Option<EmbeddingHead>,
    },
    /// Run the Gaussian-process search on a known quadratic objective.
    TuneDemo {
        #[command(flatten)]
        common: Common,
        /// Search seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        pool_size: Option<usize>,
    },
    /// Summarize run directories written by `train` and `eval`.
    Report {
        /// Run directories, e.g. `pla-out/pla pla-out/batch_hard`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write `summary.csv` into this directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, seed } => {
            let mut cfg = common.load()?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            commands::gen_data(&cfg)?;
        }
        Command::Train { common, mode, seed } => {
            let mut cfg = common.load()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            commands::train(&cfg, mode)?;
        }
        Command::Eval {
            common,
            checkpoint,
            target_dim,
            embedding,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(d) = &common.dataset {
                cfg.dataset = Some(d.clone());
            }
            let out = common
                .out
                .clone()
                .or_else(|| checkpoint.parent().map(PathBuf::from))
                .unwrap_or_else(|| cfg.out_dir.clone());
            commands::eval(
                &checkpoint,
                &cfg.dataset_path(),
                target_dim.or(cfg.eval.target_dim),
                embedding.unwrap_or(cfg.eval.embedding),
                &out,
            )?;
        }
        Command::TuneDemo {
            common,
            seed,
            rounds,
            pool_size,
        } => {
            let mut cfg = common.load()?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.tune.rounds = rounds.unwrap_or(cfg.tune.rounds);
            cfg.tune.pool_size = pool_size.unwrap_or(cfg.tune.pool_size);
            cfg.validate()?;
            commands::tune(&cfg)?;
        }
        Command::Report { runs, out } => {
            let summaries = runs
                .iter()
                .map(|d| report::summarize(d).with_context(|| format!("run {}", d.display())))
                .collect::<Result<Vec<_>>>()?;
            report::print(&summaries);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)
                    .with_context(|| format!("cannot create {}", dir.display()))?;
                let path = dir.join("summary.csv");
                std::fs::write(&path, report::summary_csv(&summaries))
                    .with_context(|| format!("cannot write {}", path.display()))?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
