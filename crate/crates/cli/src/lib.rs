//! Command-line runner for the demand laboratory: one subcommand per
//! experiment, each driven by a TOML configuration.
//!
//! Exit codes: 0 when every output was written, 1 for invalid input, 2 for a
//! numerical failure or a failed acceptance criterion. Failures leave a
//! `report.csv` naming the failing check in the output directory.

pub mod acceptance;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load, Experiment, ExperimentConfig, Overrides};
use crate::error::{CliError, CliResult};
use crate::experiments as ex;
use crate::output::{write_csv, write_text};

#[derive(Debug, Parser)]
#[command(name = "cdlab", version, about = "Structural demand counterfactual laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML configuration; authoritative over built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Replaces the seed of every simulated population.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory; defaults to `out/<subcommand>`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads.
    #[arg(long, global = true, env = "CDL_THREADS")]
    pub threads: Option<usize>,

    /// Overrides one configuration leaf, e.g. `fig1.market_count=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Draw a population and write its markets and instruments.
    Simulate,
    /// Recover mean utilities from observed shares.
    Invert,
    /// Counterfactual shares from a known demand system.
    Predict,
    /// Crossing demand curves and the conditional-variance report.
    Fig1,
    /// Parallel transformed paths under a rejected and the true candidate.
    Fig2,
    /// The three equivalent aggregate restrictions.
    VerifyThm1,
    /// The three equivalent micro restrictions.
    VerifyThm2,
    /// Fit an extrapolation rule and predict at target treatments.
    Extrapolate,
    /// Compare rule-based extrapolation with structural prediction.
    Prop32,
    /// Identify the micro model and complete it with instruments.
    MicroIdentify,
    /// Price against x1 counterfactuals under type heterogeneity.
    PriceCcs,
    /// Run every acceptance criterion.
    Acceptance,
}

impl Command {
    pub fn experiment(self) -> Experiment {
        match self {
            Command::Simulate => Experiment::Simulate,
            Command::Invert => Experiment::Invert,
            Command::Predict => Experiment::Predict,
            Command::Fig1 => Experiment::Fig1,
            Command::Fig2 => Experiment::Fig2,
            Command::VerifyThm1 => Experiment::VerifyThm1,
            Command::VerifyThm2 => Experiment::VerifyThm2,
            Command::Extrapolate => Experiment::Extrapolate,
            Command::Prop32 => Experiment::Prop32,
            Command::MicroIdentify => Experiment::MicroIdentify,
            Command::PriceCcs => Experiment::PriceCcs,
            Command::Acceptance => Experiment::Acceptance,
        }
    }
}

/// Runs one experiment with a resolved configuration, writing into `out`.
/// Returns the summary lines.
pub fn execute(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<String>> {
    ex::ensure_dir(out)?;
    let resolved = toml::to_string(cfg).map_err(|e| CliError::Validation(format!("config echo: {e}")))?;
    write_text(&out.join("resolved_config.toml"), &resolved)?;
    match cfg.experiment {
        Experiment::Simulate => ex::run_simulate(cfg, out),
        Experiment::Invert => ex::run_invert(cfg, out),
        Experiment::Predict => ex::run_predict(cfg, out),
        Experiment::Fig1 => Ok(ex::run_fig1(cfg.fig1_section()?, out)?.1),
        Experiment::Fig2 => Ok(ex::run_fig2(cfg.fig2_section()?, out)?.1),
        Experiment::VerifyThm1 => ex::run_thm1(cfg, out),
        Experiment::VerifyThm2 => ex::run_thm2(cfg, out),
        Experiment::Extrapolate => Ok(ex::run_extrapolate(cfg, out)?.1),
        Experiment::Prop32 => Ok(ex::run_prop32(cfg, out)?.1),
        Experiment::MicroIdentify => Ok(ex::run_micro(cfg.micro_section()?, out)?.1),
        Experiment::PriceCcs => ex::run_price_ccs(cfg, out),
        Experiment::Acceptance => {
            let (results, mut lines) = acceptance::run_acceptance(cfg.acceptance_section()?, out)?;
            let failed: Vec<String> =
                results.iter().filter(|c| !c.passes()).map(|c| format!("criterion {}", c.id)).collect();
            if !failed.is_empty() {
                for l in &lines {
                    println!("{l}");
                }
                return Err(CliError::ChecksFailed(failed));
            }
            lines.push("all evaluated criteria pass".into());
            Ok(lines)
        }
    }
}

fn write_failure(out: &Path, e: &CliError) {
    if ex::ensure_dir(out).is_ok() {
        let status = if e.exit_code() == 1 { "invalid" } else { "failed" };
        let _ = write_csv(
            &out.join("report.csv"),
            &["check", "status", "detail"],
            [vec![e.check(), status.to_string(), e.to_string()]],
        );
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return 1;
        }
        // a pool built earlier in this process keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let experiment = cli.command.experiment();
    let overrides = Overrides { config: cli.config, sets: cli.sets, seed: cli.seed, out: cli.out };
    let cfg = match load(experiment, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(out) = &overrides.out {
                write_failure(out, &e);
            }
            return e.exit_code();
        }
    };
    let out = cfg.output_dir.clone().unwrap_or_else(|| Path::new("out").join(experiment.name()));
    match execute(&cfg, &out) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            println!("outputs written to {}", out.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            write_failure(&out, &e);
            e.exit_code()
        }
    }
}
