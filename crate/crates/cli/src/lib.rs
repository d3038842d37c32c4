//! Command-line front end for `geemvc-core`.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod formula;
pub mod output;

use std::ffi::OsString;

use clap::Parser;

use crate::config::{parse_config, Cli, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::emit;

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "GEEMVC_THREADS";

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}: expected a positive integer, got `{value}`")))?;
    // a pool installed earlier in the process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Executes a validated configuration.
pub fn run(config: &RunConfig) -> CliResult<()> {
    configure_threads()?;
    match config {
        RunConfig::Fit(cfg) => {
            let report = commands::run_fit(cfg)?;
            emit(&report, &cfg.output)?;
            commands::check_converged(&report.fit)
        }
        RunConfig::Select(cfg) => {
            let report = commands::run_select(cfg)?;
            emit(&report, &cfg.output)
        }
        RunConfig::Simulate(cfg) => {
            let report = commands::run_simulate(cfg)?;
            emit(&report, &cfg.output)
        }
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match parse_config(cli.command).and_then(|cfg| run(&cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("geemvc: {e}");
            e.exit_code()
        }
    }
}
