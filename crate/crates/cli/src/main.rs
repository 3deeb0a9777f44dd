//! `gyromix`: train, evaluate and inspect mixed-geometry embedding models.
//!
//! Logs go to stderr (`RUST_LOG`), reports to files under `--out`, and the
//! one primary metric line to stdout. Failures print one JSON object on
//! stderr and exit 2 (validation) or 3 (runtime).

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gyromix::evaluation::RetrievalMetric;
use gyromix::parallel::{threads_from_env, with_threads};
use gyromix::FeatureFormat;

use crate::config::Split;

#[derive(Parser, Debug)]
#[command(name = "gyromix", version, about = "Euclidean, hyperbolic and mixed-geometry metric learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an encoder; writes model.json, trace.csv and train.meta.json.
    Train(Common),
    /// Recall@K of a saved model; writes recall.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_parser = parse_metric)]
        metric: Option<RetrievalMetric>,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        split: Option<Split>,
    },
    /// p(x⁻) profile, hard-negative overlap or a gradient check.
    Analyze {
        #[arg(value_enum)]
        report: Report,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Hard negatives per anchor for `overlap`.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, value_enum)]
        split: Option<Split>,
    },
    /// Train and evaluate every point of the `[sweep]` grid.
    Sweep(Common),
    /// Write the synthetic hierarchy to a feature file.
    GenData(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Report {
    PProfile,
    Overlap,
    Gradcheck,
}

/// Flags every subcommand accepts; each overrides the config file.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed (`gen-data`: generator seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Feature file format.
    #[arg(long, value_parser = parse_format)]
    format: Option<FeatureFormat>,
    /// Feature file to use instead of the configured data source.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct ModelArgs {
    /// Model snapshot written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
}

fn parse_format(s: &str) -> Result<FeatureFormat, String> {
    s.parse().map_err(|e: gyromix::Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<RetrievalMetric, String> {
    s.parse().map_err(|e: gyromix::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error::CliError::validation(first).to_line());
            return ExitCode::from(2);
        }
    };
    match with_threads(threads_from_env(), || commands::run(cli.command)) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
