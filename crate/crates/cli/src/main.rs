//! `demandcast`: ingest usage logs, synthesize panels, backtest and plot.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use chrono::NaiveDate;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use demandcast::backtest::ModelKind;

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "demandcast",
    version,
    about = "Probabilistic forecasting and rolling-origin backtests for panels of daily counts",
    after_help = "Run with --help for every configuration key and its default."
)]
struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed (also the synthetic panel seed).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for per-series work.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated models: seasonal_naive, auto_sarima, embed_nn, deepar, gp_copula.
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    models: Option<Vec<ModelKind>>,
    /// Comma-separated ISO dates of backtest origins.
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    origins: Option<Vec<NaiveDate>>,
    /// Forecast horizon in days.
    #[arg(long, global = true, value_name = "N")]
    horizon: Option<usize>,
    /// Search every SARIMA order instead of stepping through neighbours.
    #[arg(long, global = true)]
    exhaustive_arima: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count distinct daily users per profession/module/region from a usage log.
    Ingest {
        /// Log CSV (`user_id,timestamp,module,profession,region`), optionally .gz.
        log: Option<PathBuf>,
        /// Panel CSV to write.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic panel.
    Synth {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate models over rolling monthly origins; writes report.json,
    /// report.csv and per-series forecast CSVs.
    Backtest {
        #[arg(long)]
        panel: Option<PathBuf>,
    },
    /// Fit models on a panel and forecast past its end (or past --origin).
    Forecast {
        #[arg(long)]
        panel: Option<PathBuf>,
        /// First forecast day; later data is ignored.
        #[arg(long)]
        origin: Option<NaiveDate>,
    },
    /// Draw one SVG per origin and series from backtest forecast CSVs.
    Plot {
        /// Directory laid out as <origin>/<model>/<series>.csv.
        #[arg(long)]
        forecasts: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the summary tables of a backtest report.
    Report {
        /// report.json to read.
        input: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        jobs: cli.jobs,
        out: cli.out,
        models: cli.models,
        origins: cli.origins,
        horizon: cli.horizon,
        exhaustive_arima: cli.exhaustive_arima,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match cli.command {
        Command::Ingest { log, output } => {
            commands::ingest(&cfg, log.as_deref(), output.as_deref())?;
        }
        Command::Synth { output } => {
            commands::synth(&cfg, output.as_deref())?;
        }
        Command::Backtest { panel } => {
            commands::backtest(&cfg, panel.as_deref())?;
        }
        Command::Forecast { panel, origin } => commands::forecast(&cfg, panel.as_deref(), origin)?,
        Command::Plot { forecasts, output } => {
            commands::plot(&cfg, forecasts.as_deref(), output.as_deref())?;
        }
        Command::Report { input } => commands::report(&cfg, input.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEMANDCAST_LOG", "warn")).init();
    let matches = Cli::command().after_long_help(config::help_text()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
