use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use voltreg_cli::commands::{cmd_coordinate, cmd_fit_correction, cmd_report, cmd_simulate, cmd_train, RunManifest};
use voltreg_cli::config::ExperimentConfig;
use voltreg_cli::AppError;

#[derive(Parser)]
#[command(name = "voltreg", version, about = "Local ESS voltage regulation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Uncontrolled power flow over the horizon.
    Simulate(Common),
    /// Fit the voltage estimators and tabulate their errors.
    FitCorrection(Common),
    /// Train agents and compare local against full-visibility training.
    Train(Common),
    /// Run the deployed agents with and without coordination.
    Coordinate {
        #[command(flatten)]
        common: Common,
        /// Also sweep the scaling factor over the configured values.
        #[arg(long)]
        beta_sweep: bool,
    },
    /// Summarise a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, AppError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_manifest(m: &RunManifest) {
    for o in &m.outputs {
        println!("{}", o.path);
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Simulate(c) => print_manifest(&cmd_simulate(&load(&c)?)?),
        Command::FitCorrection(c) => print_manifest(&cmd_fit_correction(&load(&c)?)?),
        Command::Train(c) => print_manifest(&cmd_train(&load(&c)?)?),
        Command::Coordinate { common, beta_sweep } => print_manifest(&cmd_coordinate(&load(&common)?, beta_sweep)?),
        Command::Report { out } => {
            let s = cmd_report(&out)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("serialisable summary"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
