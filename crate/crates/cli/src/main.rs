mod commands;
mod config;
mod svg;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{Axis, Protocol};

/// Disentangled multimodal sentiment models robust to missing data.
#[derive(Parser)]
#[command(name = "derl", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,
    /// Seed for data generation, training and evaluation masks.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut all = self.set.clone();
        if let Some(out) = &self.out {
            all.push(format!("out={}", toml::Value::String(out.clone())));
        }
        if let Some(s) = self.seed {
            all.extend(["data.seed", "train.seed", "eval.seed"].map(|k| format!("{k}={s}")));
        }
        all
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its planted directions.
    GenData,
    /// Train a model and write it with its history.
    Train {
        /// Resume from this model file.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Evaluate under a missing-data protocol, or retrain the ablation variants.
    Eval {
        #[arg(long, value_enum)]
        protocol: Protocol,
        /// Model file; defaults to `<out>/model.bin`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train and evaluate one cell per axis value.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Regenerate charts from the CSVs in the output directory.
    Plot,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (cfg, data) = config::resolve(cli.common.config.as_deref(), &cli.common.overrides())?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train { model } => commands::train_cmd(&cfg, &data, model.as_deref()),
        Command::Eval { protocol, model } => commands::eval_cmd(&cfg, &data, protocol, model.as_deref()),
        Command::Sweep { axis } => commands::sweep_cmd(&cfg, &data, axis),
        Command::Plot => commands::plot(&cfg.out_dir()),
    }
}
