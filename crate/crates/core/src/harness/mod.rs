//! Config files, coupled runs, parameter sweeps, fits and validation
//! suites. Every subcommand of the `chaoslab` binary is a thin wrapper
//! around a function here.

pub mod config;
pub mod fit;
pub mod lln;
pub mod manifest;
pub mod run;
pub mod sweep;
pub mod validate;

use thiserror::Error;

pub use config::Config;
pub use fit::{fit_rows, FitReport};
pub use lln::{run_lln, LlnReport};
pub use manifest::ExperimentManifest;
pub use run::{run_single, RunReport};
pub use sweep::{reproduce_cell, run_sweep, SweepAggregate, SweepRow};
pub use validate::{run_validation, SuiteResult, ValidateOptions};

/// Worker count override.
pub const WORKERS_ENV: &str = "CHAOSLAB_WORKERS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("simulation error: {0}")]
    Simulation(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl HarnessError {
    /// 1 config or unusable input, 2 simulation, 3 validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::InsufficientData(_) => 1,
            HarnessError::Simulation(_) | HarnessError::Io { .. } => 2,
            HarnessError::Validation(_) => 3,
        }
    }

    pub(crate) fn sim(e: impl std::fmt::Display) -> Self {
        HarnessError::Simulation(e.to_string())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// `CHAOSLAB_WORKERS` if set, else the available parallelism.
pub fn resolve_workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(w) if w > 0 => Ok(w),
            _ => Err(HarnessError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Run `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Simulation(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

fn create_dir(dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(HarnessError::sim)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}
