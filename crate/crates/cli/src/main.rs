//! `retlab` command line: runs the pipeline stages against a TOML run
//! configuration and a run directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use retlab::pipeline::{exit_code, Pipeline, RunConfig, StageOutput};
use retlab::{Error, Result};

#[derive(Parser)]
#[command(name = "retlab", version, about = "Return-prediction laboratory pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Global seed; overrides the configuration's `seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Run directory; overrides `paths.out`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel from the [simulate] settings.
    Simulate(Common),
    /// Train every configured model.
    Train(Common),
    /// Write in-sample and out-of-sample forecasts.
    Predict(Common),
    /// R² table and pairwise forecast comparisons.
    Evaluate(Common),
    /// Decile portfolio tables and cumulative returns.
    Backtest(Common),
    /// Assemble the run report.
    Report(Common),
    /// Finite-difference gradient check of every architecture.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Seeds per architecture.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn pipeline(c: &Common) -> Result<Pipeline> {
    let mut config = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    let root = c
        .out
        .clone()
        .or_else(|| config.paths.out.clone())
        .ok_or_else(|| Error::Config("no run directory: pass --out or set paths.out".into()))?;
    Pipeline::new(config, root)
}

fn run(cli: Cli) -> Result<StageOutput> {
    match cli.command {
        Command::Simulate(c) => pipeline(&c)?.simulate(),
        Command::Train(c) => pipeline(&c)?.train(),
        Command::Predict(c) => pipeline(&c)?.predict(),
        Command::Evaluate(c) => pipeline(&c)?.evaluate(),
        Command::Backtest(c) => pipeline(&c)?.backtest(),
        Command::Report(c) => pipeline(&c)?.report(),
        Command::Gradcheck {
            common,
            seeds,
            tolerance,
        } => pipeline(&common)?.grad_check(seeds, tolerance),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(out) => {
            println!("{}", out.dir.display());
            for f in &out.manifest.files {
                println!("  {}  {}", f.sha256, f.path);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
