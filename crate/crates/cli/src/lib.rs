//! Command-line front end: configuration, file I/O and experiment runs.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "avprune", version, about = "Layer-wise audiovisual token pruning harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Recall,
    Retention,
    Cosine,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Pairs {
    #[value(name = "AA", alias = "aa")]
    Aa,
    #[value(name = "VV", alias = "vv")]
    Vv,
    #[value(name = "AV", alias = "av")]
    Av,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Sigmoid,
    Exponential,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the p_final that yields a target mean retention.
    Calibrate {
        #[arg(long)]
        target: f64,
        #[arg(long)]
        r0: f64,
        #[arg(long)]
        layers: usize,
        #[arg(long, default_value_t = 20.0)]
        beta: f64,
        #[arg(long = "t-mid", default_value_t = 0.5)]
        t_mid: f64,
        #[arg(long = "p-init", default_value_t = 0.0)]
        p_init: f64,
        #[arg(long, value_enum, default_value_t = KindArg::Sigmoid)]
        kind: KindArg,
    },
    /// Tabulate p_l and r_l per layer as CSV.
    Schedule {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `schedule.p_final=0.3`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value_t = 0.45)]
        r0: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the pruning pipeline and write trace artifacts.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-layer attention tensors under `<out>/attention`.
        #[arg(long = "dump-attention")]
        dump_attention: bool,
        /// Replay attention from a dump directory instead of running the model.
        #[arg(long)]
        inject: Option<PathBuf>,
        /// Number of consecutive sequence seeds to run.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Diagnostics over simulation artifacts.
    Analyze {
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Token layout (`sequence.jsonl`) giving modality tags.
        #[arg(long)]
        layout: Option<PathBuf>,
        /// Attention dump directory.
        #[arg(long)]
        attention: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Pairs::Av)]
        pairs: Pairs,
        #[arg(long = "sample-cap", default_value_t = 100_000)]
        sample_cap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-row top-20% averaged over rows instead of the flattened map.
        #[arg(long = "per-row")]
        per_row: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic FLOPs and KV-memory report for a trace.
    Cost {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        d: usize,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["2", "4"]))]
        bytes: String,
        /// Also write the per-layer table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    commands::dispatch(cli.command)
}
