//! `rnnsm`: generate synthetic sessions, train the return-time models,
//! predict for held-out users and score the predictions.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use rnnsm_core::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "rnnsm", version, about = "Return-time prediction with recurrent survival models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated: baseline, rnn, cph, cpha, rnnsm, rnnsma or all.
    #[arg(long, value_delimiter = ',')]
    model: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 or absent uses every core.
    #[arg(long)]
    threads: Option<usize>,
    /// JSON-lines session file; without it the generator supplies the data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic session file and its ground truth.
    Generate(Common),
    /// Fit the selected models on the training split.
    Train(Common),
    /// Write predictions for the held-out split.
    Predict(Common),
    /// Score prediction files and write the report and plot tables.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Prediction CSVs to compare, named by file stem. Defaults to the
        /// selected models' predictions in the output directory.
        files: Vec<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_ref())?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if !common.model.is_empty() {
        cfg.models = common.model.clone();
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    if common.data.is_some() {
        cfg.data = common.data.clone();
    }
    cfg.apply_seed();
    if let Some(n) = cfg.threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => commands::cmd_generate(&resolve(&c)?),
        Command::Train(c) => commands::cmd_train(&resolve(&c)?),
        Command::Predict(c) => commands::cmd_predict(&resolve(&c)?),
        Command::Evaluate { common, files } => {
            let table = commands::cmd_evaluate(&resolve(&common)?, &files)?;
            print!("{table}");
            Ok(())
        }
    }
}

/// 2 for configuration errors, 3 for data or model mismatches, 4 for
/// numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                Error::Numerical(_) | Error::Diverged { .. } => 4,
                Error::InvalidRecord { .. }
                | Error::InvalidInput(_)
                | Error::Mismatch(_)
                | Error::Io(_)
                | Error::Json(_) => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kinds() {
        let wrap = |e: Error| anyhow::Error::new(e).context("running");
        assert_eq!(exit_code(&wrap(Error::Config("x".into()))), 2);
        assert_eq!(exit_code(&wrap(Error::Mismatch("x".into()))), 3);
        assert_eq!(exit_code(&wrap(Error::InvalidInput("x".into()))), 3);
        assert_eq!(exit_code(&wrap(Error::Numerical("x".into()))), 4);
        assert_eq!(
            exit_code(&wrap(Error::Diverged {
                epoch: 2,
                restored_epoch: 1
            })),
            4
        );
    }
}
