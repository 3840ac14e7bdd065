//! Command-line front end: run scenarios, rebuild summaries from stored
//! logs, and export plot-ready data files.
//!
//! Exit codes: 0 success, 2 configuration or file-format error, 3 dynamics
//! failure (attachment blowup or solver breakdown), 4 persistent safety
//! violation. Run artifacts are always written before a nonzero exit so
//! failures can be inspected.

use clap::{Parser, Subcommand};
use cotrans::scenario::{
    export_plots, read_log, run_scenario, summarize_file, write_artifacts, MeasurementSpec,
    Overrides, ScenarioError, ScenarioSpec,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cotrans",
    version,
    about = "Cooperative-transport NMPC: scenario runner, summarizer, and plot exporter"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario in closed loop and write log, summary, and timing
    /// artifacts.
    Run {
        /// Scenario description (TOML).
        scenario: PathBuf,
        /// Output directory (defaults to runs/<scenario-name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the prediction horizon length.
        #[arg(long)]
        horizon: Option<usize>,
        /// Override the control interval in seconds.
        #[arg(long)]
        dt: Option<f64>,
        /// Feed the controller the exact plant state.
        #[arg(long, conflicts_with = "reconstruct_payload")]
        exact_measure: bool,
        /// Feed the controller a payload state reconstructed from robot
        /// poses.
        #[arg(long)]
        reconstruct_payload: bool,
        /// Drop the obstacle-avoidance constraints from the controller
        /// (the monitor still records clearances).
        #[arg(long)]
        no_safety: bool,
    },
    /// Write plot-ready CSV files (velocities, wrenches, clearances, planar
    /// traces) from a stored log.
    ExportPlots {
        /// Stored run log (.csv or .bin).
        log: PathBuf,
        /// Output directory (defaults to a plots/ directory next to the
        /// log).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the deterministic summary from a stored log and print it.
    Summarize {
        /// Stored run log (.csv or .bin).
        log: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;

fn config_error(err: &ScenarioError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(EXIT_CONFIG)
}

fn cmd_run(
    scenario: PathBuf,
    out: Option<PathBuf>,
    overrides: Overrides,
) -> Result<ExitCode, ScenarioError> {
    let mut spec = ScenarioSpec::from_file(&scenario)?;
    spec.apply(&overrides);
    spec.validate()?;

    let out_dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&spec.name));
    println!(
        "running '{}': {} ticks at {} Hz, horizon {}, seed {}, safety {}, measurement {:?}",
        spec.name,
        spec.ticks(),
        spec.control_rate_hz,
        spec.horizon,
        spec.seed,
        if spec.safety_enabled { "on" } else { "off" },
        spec.measurement,
    );

    let outcome = run_scenario(&spec)?;
    let paths = write_artifacts(&out_dir, &outcome)?;
    println!("{}", outcome.summary.to_toml_string()?);
    for p in [&paths.log_csv, &paths.log_bin, &paths.summary, &paths.timing] {
        println!("wrote {}", p.display());
    }

    match outcome.exit_code() {
        0 => Ok(ExitCode::SUCCESS),
        3 => {
            eprintln!(
                "run ended early: {} ({})",
                outcome.summary.status, outcome.summary.status_detail
            );
            Ok(ExitCode::from(3))
        }
        4 => {
            eprintln!(
                "persistent safety violation: min clearance {} m, longest excursion {} s",
                outcome.summary.min_h_m, outcome.summary.longest_violation_s
            );
            Ok(ExitCode::from(4))
        }
        other => Ok(ExitCode::from(other as u8)),
    }
}

fn cmd_export_plots(log_path: PathBuf, out: Option<PathBuf>) -> Result<ExitCode, ScenarioError> {
    let (log, meta) = read_log(&log_path)?;
    let out_dir = out.unwrap_or_else(|| {
        log_path.parent().unwrap_or_else(|| std::path::Path::new(".")).join("plots")
    });
    let written = export_plots(&out_dir, &log, &meta)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_summarize(log_path: PathBuf) -> Result<ExitCode, ScenarioError> {
    let summary = summarize_file(&log_path)?;
    print!("{}", summary.to_toml_string()?);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            horizon,
            dt,
            exact_measure,
            reconstruct_payload,
            no_safety,
        } => {
            let measurement = if reconstruct_payload {
                Some(MeasurementSpec::ReconstructPayload)
            } else if exact_measure {
                Some(MeasurementSpec::Exact)
            } else {
                None
            };
            let overrides = Overrides {
                seed,
                horizon,
                control_interval_s: dt,
                measurement,
                disable_safety: no_safety,
            };
            cmd_run(scenario, out, overrides)
        }
        Command::ExportPlots { log, out } => cmd_export_plots(log, out),
        Command::Summarize { log } => cmd_summarize(log),
    };
    result.unwrap_or_else(|err| config_error(&err))
}
