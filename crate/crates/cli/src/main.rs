use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chaoslab_core::harness::fit::{fit_rows, read_points, BOOTSTRAP_RESAMPLES};
use chaoslab_core::harness::sweep::reproduce_cell;
use chaoslab_core::harness::validate::format_table;
use chaoslab_core::harness::{
    resolve_workers, run_lln, run_single, run_sweep, run_validation, Config, ExperimentManifest, HarnessError,
    ValidateOptions,
};
use chaoslab_core::kernel::KernelMutation;
use chaoslab_core::transport::{coupling_bounds, optimal_assignment, w1_exact};
use chaoslab_core::{EmpiricalMeasure, ParticleEnsemble};

/// Coupled N-particle vs. mean-field simulations, fluctuation statistics
/// and transport distances.
#[derive(Parser)]
#[command(name = "chaoslab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One coupled run: per-step CSV, final states and a JSON summary.
    Run {
        config: Option<PathBuf>,
        /// Output directory (overrides `output.directory`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the default config and exit.
        #[arg(long)]
        print_defaults: bool,
    },
    /// Replicated runs over the N grid: JSONL rows and an aggregate JSON.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Law-of-large-numbers fluctuation statistics over the LLN grid.
    Lln {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Measure at T/2 after transport by the mean-field flow.
        #[arg(long)]
        evolved: bool,
    },
    /// Exact W1 between two ensemble CSV files of equal size.
    Wasserstein { first: PathBuf, second: PathBuf },
    /// Power-law fit of a sweep table with a bootstrap CI.
    Fit {
        rows: PathBuf,
        #[arg(long, default_value_t = BOOTSTRAP_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run one sweep cell from its manifest and print the row.
    Reproduce {
        manifest: PathBuf,
        #[arg(long = "n")]
        n: usize,
        #[arg(long)]
        replica: usize,
    },
    /// Invariant suites; exits with 3 when any suite fails.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        energy_tol: Option<f64>,
        #[arg(long)]
        energy_dt: Option<f64>,
        /// Samples per kernel inequality and kernel.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Print the default config as TOML.
    PrintDefaults,
}

type Result<T> = std::result::Result<T, HarnessError>;

fn load_config(path: Option<&Path>, out: Option<PathBuf>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(o) = out {
        cfg.output.directory = o;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Simulation(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn read_ensemble(path: &Path) -> Result<ParticleEnsemble> {
    let f = File::open(path).map_err(|e| HarnessError::Config(format!("cannot open {}: {e}", path.display())))?;
    ParticleEnsemble::read_csv(BufReader::new(f)).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

fn wasserstein(first: &Path, second: &Path) -> Result<serde_json::Value> {
    let a = EmpiricalMeasure::from_ensemble(&read_ensemble(first)?).map_err(|e| HarnessError::Config(e.to_string()))?;
    let b =
        EmpiricalMeasure::from_ensemble(&read_ensemble(second)?).map_err(|e| HarnessError::Config(e.to_string()))?;
    let cfg_err = |e: chaoslab_core::transport::TransportError| HarnessError::Config(e.to_string());
    let w1 = w1_exact(&a, &b).map_err(cfg_err)?;
    let assignment = optimal_assignment(&a, &b).map_err(cfg_err)?;
    let bounds = coupling_bounds(&a, &b).map_err(cfg_err)?;
    Ok(serde_json::json!({
        "n": a.len(),
        "w1": w1,
        "w1_upper": bounds.w1_upper,
        "winf_upper": bounds.winf_upper,
        "assignment_max_displacement": assignment.max_displacement(&a, &b),
    }))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { print_defaults: true, .. } | Command::PrintDefaults => {
            print!("{}", Config::default().to_toml_string());
        }
        Command::Run { config, out, .. } => {
            let cfg = load_config(config.as_deref(), out)?;
            let dir = cfg.output.directory.clone();
            let report = run_single(&cfg, &dir)?;
            print_json(&report)?;
            eprintln!("[run] outputs in {}", dir.display());
        }
        Command::Sweep { config, out } => {
            let cfg = load_config(Some(&config), out)?;
            if !cfg.sweep_is_full() {
                eprintln!("[sweep] note: fewer than 3 N values or 10 replicas; the aggregate omits the fit");
            }
            let workers = resolve_workers()?;
            let dir = cfg.output.directory.clone();
            eprintln!(
                "[sweep] N = {:?}, {} replicas, {workers} workers, outputs in {}",
                cfg.sweep.n_values,
                cfg.sweep.replicas,
                dir.display()
            );
            let (_, agg) = run_sweep(&cfg, &dir, workers)?;
            for p in &agg.per_n {
                eprintln!(
                    "[sweep] N = {:>6}  median sup_weighted = {:.4e}  exceedance = {:.3}",
                    p.n, p.median_sup_weighted, p.exceedance_fraction
                );
            }
            print_json(&agg)?;
        }
        Command::Lln { config, out, evolved } => {
            let mut cfg = load_config(Some(&config), out)?;
            cfg.lln.evolved |= evolved;
            let workers = resolve_workers()?;
            let dir = cfg.output.directory.clone();
            let (_, report) = run_lln(&cfg, &dir, workers)?;
            print_json(&report)?;
            eprintln!("[lln] outputs in {}", dir.display());
        }
        Command::Wasserstein { first, second } => print_json(&wasserstein(&first, &second)?)?,
        Command::Fit { rows, resamples, seed, out } => {
            let report = fit_rows(&read_points(&rows)?, resamples, seed)?;
            if let Some(path) = out {
                let text =
                    serde_json::to_string_pretty(&report).map_err(|e| HarnessError::Simulation(e.to_string()))?;
                std::fs::write(&path, text + "\n")
                    .map_err(|e| HarnessError::Simulation(format!("cannot write {}: {e}", path.display())))?;
            }
            print_json(&report)?;
        }
        Command::Reproduce { manifest, n, replica } => {
            let m = ExperimentManifest::load(&manifest)?;
            let row = reproduce_cell(&m, n, replica, resolve_workers()?)?;
            println!("{}", serde_json::to_string(&row).map_err(|e| HarnessError::Simulation(e.to_string()))?);
        }
        Command::Validate { config, energy_tol, energy_dt, samples, inject_sign_flip } => {
            let cfg = load_config(config.as_deref(), None)?;
            let d = ValidateOptions::default();
            let opts = ValidateOptions {
                energy_tolerance: energy_tol.unwrap_or(d.energy_tolerance),
                energy_dt: energy_dt.or(d.energy_dt),
                kernel_samples: samples.unwrap_or(d.kernel_samples),
                mutation: inject_sign_flip.then_some(KernelMutation::SignFlipNegativeX),
                ..d
            };
            let results = run_validation(&cfg, &opts)?;
            print!("{}", format_table(&results));
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(HarnessError::Validation(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are config errors; help and version are not errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("chaoslab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
