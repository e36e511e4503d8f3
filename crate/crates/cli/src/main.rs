//! `nmtomo`: simulate probe dynamics, sample tomograms, reconstruct bath parameters.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nmtomo::reconstruct::StageFailure;

use config::{ExperimentConfig, MethodChoice, Overrides};

#[derive(Parser, Debug)]
#[command(name = "nmtomo", version, about = "Tomographic reconstruction of open-oscillator bath parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON). Flags override values from the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Use a single noise seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_enum)]
    method: Option<MethodChoice>,

    /// Standard deviation of the additive noise on tomogram values.
    #[arg(long, global = true)]
    noise_sigma: Option<f64>,

    /// Output root; files go to `<out>/<run-id>/`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Measure first cumulants along the rotating-frame quadrature.
    #[arg(long, global = true)]
    rotating_frame: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write cumulant trajectories as CSV.
    Simulate,
    /// Sample tomograms at the measurement times and reconstruct cumulants from them.
    Tomogram,
    /// Run the full reconstruction and write reports.
    Reconstruct,
    /// Write the per-time alpha^2(omega_c) curves and their intersection.
    Figures,
    /// Check physical and numerical invariants for the configuration.
    Validate,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Solver(anyhow::Error),
    Breach(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Solver(_) => 3,
            Failure::Breach(_) => 4,
        }
    }

    fn record(&self) -> serde_json::Value {
        let (class, e) = match self {
            Failure::Config(e) => ("config", e),
            Failure::Solver(e) => ("solver", e),
            Failure::Breach(e) => ("invariant", e),
        };
        let kind = match (e.downcast_ref::<nmtomo::Error>(), e.downcast_ref::<StageFailure>()) {
            (Some(n), _) => n.kind(),
            (None, Some(s)) => s.kind.as_str(),
            (None, None) => "Other",
        };
        serde_json::json!({
            "error": { "class": class, "kind": kind, "message": format!("{e:#}"), "exit_code": self.code() }
        })
    }

    /// Classifies a library error by whether it signals an unphysical state.
    pub fn from_core(e: nmtomo::Error) -> Self {
        if e.is_invariant_breach() {
            Failure::Breach(e.into())
        } else {
            Failure::Solver(e.into())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        method: cli.method,
        noise_sigma: cli.noise_sigma,
        out: cli.out.clone(),
        rotating_frame: cli.rotating_frame,
    };
    let result = ExperimentConfig::load(cli.config.as_deref(), &overrides)
        .map_err(Failure::Config)
        .and_then(|cfg| match cli.command {
            Command::Simulate => commands::simulate(&cfg),
            Command::Tomogram => commands::tomogram(&cfg),
            Command::Reconstruct => commands::reconstruct(&cfg),
            Command::Figures => commands::figures(&cfg),
            Command::Validate => commands::validate(&cfg),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.record());
            ExitCode::from(f.code())
        }
    }
}
