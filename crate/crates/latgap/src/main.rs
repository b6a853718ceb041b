//! Command-line entry point for the latency-gap experiment harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use latgap::harness::{
    cmd_calibrate, cmd_demos, cmd_report, cmd_run, ExperimentConfig, OutPaths,
};

#[derive(Parser)]
#[command(
    name = "latgap",
    about = "Deterministic testbed comparing execution strategies for \
             finite-horizon visuomotor policies under sensing, inference, \
             and actuation latencies."
)]
struct Cli {
    /// TOML configuration file; every field has a built-in default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Comma-separated strategy subset (blocking, naive_async, latency_aware).
    #[arg(long, global = true, value_delimiter = ',')]
    strategies: Option<Vec<String>>,

    /// Comma-separated inference-latency subset, ms.
    #[arg(long, global = true, value_delimiter = ',')]
    latencies: Option<Vec<u64>>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the demonstration set, its metrics, and the normalizer.
    Demos,
    /// Measure execution and observation latencies and persist them.
    Calibrate,
    /// Run the strategy x latency grid against the stored demonstrations.
    Run {
        /// Exit nonzero unless every trend gate passes.
        #[arg(long)]
        check: bool,
    },
    /// Recompute the summary table and trend gates from stored metrics.
    Report {
        /// Exit nonzero unless every trend gate passes.
        #[arg(long)]
        check: bool,
    },
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.grid.seed = seed;
    }
    if let Some(strategies) = &cli.strategies {
        cfg.grid.strategies = strategies.clone();
    }
    if let Some(latencies) = &cli.latencies {
        cfg.grid.inference_latencies_ms = latencies.clone();
    }
    if let Some(out) = &cli.out {
        cfg.grid.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gate_exit(check: bool, all_pass: bool) -> ExitCode {
    if check && !all_pass {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn dispatch() -> Result<ExitCode> {
    let cli = Cli::parse();
    let cfg = resolve(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(ExitCode::SUCCESS);
    }
    let paths = OutPaths::new(Path::new(&cfg.grid.out_dir));
    match cli.command {
        Some(Command::Demos) => {
            cmd_demos(&cfg, &paths)?;
            Ok(ExitCode::SUCCESS)
        }
        Some(Command::Calibrate) => {
            cmd_calibrate(&cfg, &paths)?;
            Ok(ExitCode::SUCCESS)
        }
        Some(Command::Run { check }) => {
            cmd_run(&cfg, &paths)?;
            let all_pass = cmd_report(&cfg, &paths)?;
            Ok(gate_exit(check, all_pass))
        }
        Some(Command::Report { check }) => {
            let all_pass = cmd_report(&cfg, &paths)?;
            Ok(gate_exit(check, all_pass))
        }
        // Bare invocation: the full pipeline on the configured output dir.
        None => {
            if !paths.demo_file(0).exists() {
                cmd_demos(&cfg, &paths)?;
            }
            cmd_run(&cfg, &paths)?;
            cmd_report(&cfg, &paths)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
