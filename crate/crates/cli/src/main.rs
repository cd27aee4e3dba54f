//! `scengan`: synthesize fleets, train the GAN, forecast scenarios, evaluate them.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numeric fault or a forecast with infeasible scenarios.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "scengan", version, about = "Scenario forecasting for renewable fleets with a Wasserstein GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command.
#[derive(Args, Debug)]
pub struct Common {
    /// key=value configuration file; command-line flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic fleet with a known ground truth.
    Synth(commands::SynthArgs),
    /// Train generator and critic on a fleet directory.
    Train(commands::TrainArgs),
    /// Generate scenarios around a point forecast with a trained model.
    Forecast(commands::ForecastArgs),
    /// Compare generated samples or scenarios with reference data.
    Evaluate(commands::EvaluateArgs),
    /// Print the default configuration of a command with key descriptions.
    Defaults {
        #[arg(value_parser = ["synth", "train", "forecast", "evaluate"])]
        command: String,
    },
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    pub fn code(&self) -> u8 {
        self.code
    }

    pub fn message(&self) -> &str {
        &self.message
    }
}

impl From<scengan_core::Error> for Failure {
    fn from(e: scengan_core::Error) -> Self {
        use scengan_core::Error as E;
        let message = e.to_string();
        match e {
            _ if e.is_numeric() => Self::numeric(message),
            E::Config(_) => Self::usage(message),
            _ => Self::data(message),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Forecast(a) => commands::forecast(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Defaults { command } => {
            print!("{}", commands::defaults(&command).to_text());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
