//! `dwm`: train a deterministic world model for a vision-based controller,
//! bound its gap to the real camera, and verify the closed loop over a grid
//! of initial states.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure,
//! 3 provenance mismatch.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dwm_core::Error;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "dwm", version, about = "World-model training, conformal bounds and closed-loop verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Sample states and render them with the real camera.
    GenerateData,
    /// Clone the analytic expert into an image controller.
    TrainController,
    /// Train the decoder on the dataset against the frozen controller.
    Train,
    /// Sweep the grid and write the safety map.
    Verify,
    /// Score paired rollouts and write the conformal certificate.
    Calibrate,
    /// Compare safety maps (with and without the conformal bound) to ground truth.
    Evaluate,
    /// Run every stage in order.
    Pipeline,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::ProvenanceMismatch(_)) => 3,
        Some(
            Error::NumericalDomain(_)
            | Error::TrainingDiverged { .. }
            | Error::SolverStalled { .. }
            | Error::InfeasibleStar,
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let run = || -> anyhow::Result<()> {
        let cfg = RunConfig::resolve(&cli.overrides).map_err(|e| e.context("invalid configuration"))?;
        match cli.command {
            Command::GenerateData => commands::generate_data(&cfg),
            Command::TrainController => commands::train_controller(&cfg),
            Command::Train => commands::train(&cfg),
            Command::Verify => commands::verify(&cfg),
            Command::Calibrate => commands::calibrate(&cfg),
            Command::Evaluate => commands::evaluate(&cfg),
            Command::Pipeline => commands::pipeline(&cfg),
            Command::ShowConfig => {
                print!("{}", toml::to_string_pretty(&cfg)?);
                Ok(())
            }
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
