mod commands;
mod manifest;

use clap::{Parser, Subcommand, ValueEnum};
use csda_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "csda", version, about = "Coupled photon/electron/positron transport and dose planning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario config (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (env CSDA_OUT).
    #[arg(long, global = true, env = "CSDA_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum Command {
    /// Check the coefficient and kernel hypotheses.
    Validate,
    /// Forward solve with the configured beam and volume source.
    Forward,
    /// Adjoint solve with the target dose as detector.
    Adjoint,
    /// Optimize a treatment plan.
    Plan {
        #[arg(long, value_enum, default_value_t = PlanMode::External)]
        mode: PlanMode,
    },
    /// Compare the exact and truncated hypersingular terms for shrinking kappa.
    KappaStudy,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    External,
    Internal,
    Linear,
}

/// Exit status of a run.
pub enum Failure {
    Validation(String),
    Convergence(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Convergence(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Convergence(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::NonConvergence { .. } => Failure::Convergence(m),
            Error::Io { .. } => Failure::Io(m),
            Error::Domain(ref s) if s.contains("diverging") => Failure::Convergence(m),
            _ => Failure::Validation(m),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
