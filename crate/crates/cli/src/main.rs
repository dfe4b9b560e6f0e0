//! `hime`: command-line front end for the multi-exemplar super-resolution
//! toolkit.
//!
//! Exit codes: 0 success, 1 a check or run failed, 2 usage or
//! configuration error.

mod commands;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "hime", version, about = "Multi-exemplar super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the local correlation map of an image.
    Corrmap(commands::CorrmapArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Train on the synthetic reference task.
    Train(Box<train::TrainArgs>),
    /// Super-resolve an image from a checkpoint and references.
    Infer(commands::InferArgs),
    /// PSNR and SSIM between images.
    Metrics(commands::MetricsArgs),
    /// Block-matching flow between two images.
    Flow(commands::FlowArgs),
}

/// How a command ended, mapped onto the exit code contract.
pub enum Outcome {
    Ok,
    /// A check or run completed but did not meet its bar.
    Failed,
}

/// Configuration and usage problems exit with 2, failed runs with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<hime_core::Error>() {
        Some(hime_core::Error::Diverged { .. }) | Some(hime_core::Error::NonFiniteGradient(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Corrmap(a) => commands::corrmap(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Train(a) => train::train(*a),
        Command::Infer(a) => commands::infer(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Flow(a) => commands::flow(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
