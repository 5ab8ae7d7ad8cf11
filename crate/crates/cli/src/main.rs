//! Command-line front end: scenario runs, compliance sweeps, safety tables
//! and detector calibration.
//!
//! Machine-readable output goes to files (or stdout for tables); logs and
//! diagnostics go to stderr. Exit codes: 0 success, 1 validation error,
//! 2 runtime/numeric error, 3 I/O error.

mod commands;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rainlane", version, about = "Lane-level wet-weather speed guidance simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Baseline,
    Control,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetArg {
    /// Fundamental diagram per (segment, lane).
    Fd,
    /// Rainy-weather speed-density surface.
    Rain,
}

#[derive(Subcommand)]
enum Command {
    /// Run one full-horizon simulation and write its artifacts.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory (environment variable RAINLANE_OUT overrides).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
    },
    /// Sweep the driver compliance rate over seeds and tabulate the metrics.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// Parameter to sweep (only `gamma` is supported).
        #[arg(long, default_value = "gamma")]
        param: String,
        /// Comma-separated values in [0, 1].
        #[arg(long)]
        values: String,
        /// Seeds 1..=N per value.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel jobs (environment variable RAINLANE_JOBS overrides).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Emit the safety envelope as a CSV over a rainfall sweep.
    SafetyTable {
        /// Scenario file carrying the ramp geometry.
        #[arg(long = "ramp-config")]
        ramp_config: PathBuf,
        #[arg(long = "rain-min", default_value_t = 0.0)]
        rain_min: f64,
        #[arg(long = "rain-max", default_value_t = 10.0)]
        rain_max: f64,
        #[arg(long, default_value_t = 21)]
        steps: usize,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit model parameters from a detector CSV.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        target: TargetArg,
        /// Where to write the fitted config fragment.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            mode,
            seed,
            out,
            format,
        } => commands::run(
            &scenario,
            match mode {
                ModeArg::Baseline => rainlane_core::microsim::RunMode::Baseline,
                ModeArg::Control => rainlane_core::microsim::RunMode::Control,
            },
            seed,
            out,
            format == FormatArg::Csv,
        ),
        Command::Sweep {
            scenario,
            param,
            values,
            seeds,
            out,
            jobs,
        } => commands::sweep(&scenario, &param, &values, seeds, out, jobs),
        Command::SafetyTable {
            ramp_config,
            rain_min,
            rain_max,
            steps,
            out,
        } => commands::safety_table(&ramp_config, rain_min, rain_max, steps, out),
        Command::Calibrate { data, target, out } => {
            commands::calibrate(&data, target == TargetArg::Rain, out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(err.exit_code())
        }
    }
}
