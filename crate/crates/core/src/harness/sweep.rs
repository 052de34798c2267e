//! Parallel `(N, replica)` sweeps with per-row JSONL output.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::fit::{fit_rows, FitPoint, FitReport, BOOTSTRAP_RESAMPLES, MIN_FIT_N};
use super::manifest::ExperimentManifest;
use super::run::{coupled_run, reference_flow};
use super::{with_workers, write_json, HarnessError, Result};
use crate::coupling::{j0_closed_form, CoupledTrajectory};
use crate::kernel::KernelSpec;
use crate::meanfield::ReferenceFlow;
use crate::sampling::{derive_seed, rng_from_seed, sample_indices};
use crate::stats::{is_nonincreasing, median};
use crate::transport::{
    chaos_decay, coupling_bounds, optimal_assignment, w1_exact, w1_vs_meanfield, ChaosRow, EmpiricalMeasure,
    ObservableMoments, MIN_CHAOS_REPLICAS,
};

pub const ROWS_FILE: &str = "rows.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.json";

// stream tag of the W1 subsample draw
const W1_STREAM: u64 = 0x57_31;

/// Summary of one `(N, replica)` cell. Every field but `runtime_ms` is a
/// deterministic function of the manifest and `(N, replica)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub manifest_hash: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub replica: usize,
    pub seed: u64,
    pub beta: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub dt: f64,
    pub steps: usize,
    pub sup_d1: f64,
    pub sup_d2: f64,
    pub sup_weighted: f64,
    #[serde(rename = "J0")]
    pub j0: f64,
    #[serde(rename = "J0_closed_form")]
    pub j0_closed_form: f64,
    #[serde(rename = "J_T")]
    pub j_t: f64,
    /// `sup_weighted > N^-alpha`.
    pub exceeded: bool,
    #[serde(rename = "frac_inB")]
    pub frac_in_b: f64,
    #[serde(rename = "frac_inC")]
    pub frac_in_c: f64,
    #[serde(rename = "J_nondecreasing")]
    pub j_nondecreasing: bool,
    #[serde(rename = "J_in_unit_interval")]
    pub j_in_unit_interval: bool,
    #[serde(rename = "J_one_iff_inA")]
    pub j_one_iff_in_a: bool,
    pub w1_points: usize,
    /// Exact `W_1` between index-matched subsamples of `Psi_T` and `Phi_T`.
    pub w1_final: f64,
    pub w1_upper: f64,
    pub winf_upper: f64,
    pub assignment_max_displacement: f64,
    /// `W_1` between the `Psi_T` subsample and a subsample of the evolved
    /// reference ensemble.
    pub w1_proxy: f64,
    pub chaos: ObservableMoments,
    pub runtime_ms: u64,
}

impl SweepRow {
    /// `exceeded` re-derived from the raw values.
    pub fn flags_consistent(&self) -> bool {
        self.exceeded == (self.sup_weighted > (self.n as f64).powf(-self.alpha))
    }

    pub fn j_invariants_hold(&self) -> bool {
        self.j_nondecreasing
            && self.j_in_unit_interval
            && self.j_one_iff_in_a
            && (self.j0 - self.j0_closed_form).abs() <= 1e-12
    }

    /// The row with the wall-clock field cleared, for bitwise comparison.
    pub fn deterministic_json(&self) -> String {
        let mut r = self.clone();
        r.runtime_ms = 0;
        serde_json::to_string(&r).expect("row serialises")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerN {
    #[serde(rename = "N")]
    pub n: usize,
    pub replicas: usize,
    pub exceedance_fraction: f64,
    pub median_sup_weighted: f64,
    pub median_sup_d1: f64,
    pub median_sup_d2: f64,
    #[serde(rename = "median_J_T")]
    pub median_j_t: f64,
    #[serde(rename = "mean_frac_inB")]
    pub mean_frac_in_b: f64,
    #[serde(rename = "mean_frac_inC")]
    pub mean_frac_in_c: f64,
    pub median_w1_final: f64,
    pub median_w1_proxy: f64,
    #[serde(rename = "J_invariants_hold")]
    pub j_invariants_hold: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub manifest_hash: String,
    pub per_n: Vec<PerN>,
    pub median_sup_weighted_strictly_decreasing: bool,
    pub exceedance_nonincreasing: bool,
    /// Present once every `N` has enough replicas.
    pub chaos: Option<Vec<ChaosRow>>,
    pub chaos_nonincreasing: Option<bool>,
    /// Present for grids with at least three `N`.
    pub fit: Option<FitReport>,
    /// The grid meets the main-experiment size (3 N values, 10 replicas).
    pub full_grid: bool,
}

fn check_j(traj: &CoupledTrajectory) -> (bool, bool, bool) {
    let r = &traj.records;
    let nondecreasing = r.windows(2).all(|w| w[1].j >= w[0].j);
    let unit = r.iter().all(|s| s.j > 0.0 && s.j <= 1.0);
    let one_iff_a = r.iter().all(|s| (s.j == 1.0) == s.in_a);
    (nondecreasing, unit, one_iff_a)
}

/// Seed of replica `r` at particle count `n`.
pub fn cell_seed(cfg: &Config, n: usize, replica: usize) -> u64 {
    derive_seed(cfg.sweep.base_seed, &[n as u64, replica as u64])
}

/// Computes one row. `reference` must be the flow built by
/// [`reference_flow`] for `spec`.
pub fn run_cell(
    cfg: &Config,
    manifest_hash: &str,
    spec: &KernelSpec,
    reference: &ReferenceFlow,
    replica: usize,
) -> Result<SweepRow> {
    let start = Instant::now();
    let n = spec.n_particles();
    let seed = cell_seed(cfg, n, replica);
    let traj = coupled_run(cfg, spec, reference, seed)?;
    let s = traj.summary();
    let (j_nondecreasing, j_in_unit_interval, j_one_iff_in_a) = check_j(&traj);

    let k = cfg.sweep.w1_points.min(n);
    let mut rng = rng_from_seed(derive_seed(seed, &[W1_STREAM]));
    let idx = sample_indices(n, k, &mut rng);
    let measure = |e: &crate::sampling::ParticleEnsemble| EmpiricalMeasure::from_ensemble(e).map_err(HarnessError::sim);
    let psi = measure(&traj.final_psi.select(&idx))?;
    let phi = measure(&traj.final_phi.select(&idx))?;
    let w1_final = w1_exact(&psi, &phi).map_err(HarnessError::sim)?;
    let assignment = optimal_assignment(&psi, &phi).map_err(HarnessError::sim)?;
    let bounds = coupling_bounds(&psi, &phi).map_err(HarnessError::sim)?;
    let ref_t = reference.snapshot(reference.n_steps());
    let ref_idx = sample_indices(ref_t.n(), k, &mut rng);
    let proxy = w1_vs_meanfield(&psi, &measure(&ref_t.select(&ref_idx))?).map_err(HarnessError::sim)?;
    let chaos = ObservableMoments::of(&measure(&traj.final_psi)?);

    Ok(SweepRow {
        manifest_hash: manifest_hash.to_string(),
        n,
        replica,
        seed,
        beta: s.beta,
        alpha: s.alpha,
        lambda: s.lambda,
        gamma: s.gamma,
        t_end: s.t_end,
        dt: s.dt,
        steps: s.steps,
        sup_d1: s.sup_d1,
        sup_d2: s.sup_d2,
        sup_weighted: s.sup_weighted,
        j0: traj.records.first().map_or(f64::NAN, |r| r.j),
        j0_closed_form: j0_closed_form(n, s.beta, &cfg.coupling, s.t_end),
        j_t: s.j_t,
        exceeded: s.exceeded,
        frac_in_b: s.frac_steps_in_b,
        frac_in_c: s.frac_steps_in_c,
        j_nondecreasing,
        j_in_unit_interval,
        j_one_iff_in_a,
        w1_points: k,
        w1_final,
        w1_upper: bounds.w1_upper,
        winf_upper: bounds.winf_upper,
        assignment_max_displacement: assignment.max_displacement(&psi, &phi),
        w1_proxy: proxy.w1_proxy,
        chaos,
        runtime_ms: start.elapsed().as_millis() as u64,
    })
}

struct RowWriter {
    path: std::path::PathBuf,
    file: Mutex<File>,
}

impl RowWriter {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), file: Mutex::new(file) })
    }

    // one write and flush per row so an interrupted sweep keeps every
    // finished row
    fn push(&self, row: &SweepRow) -> Result<()> {
        let mut line = serde_json::to_string(row).map_err(HarnessError::sim)?;
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(line.as_bytes()).and_then(|_| f.flush()).map_err(|e| HarnessError::io(&self.path, e))
    }
}

/// Full sweep: manifest first, then one JSONL row per finished cell, then
/// the aggregate. Returns the rows sorted by `(N, replica)`.
pub fn run_sweep(cfg: &Config, out_dir: &Path, workers: usize) -> Result<(Vec<SweepRow>, SweepAggregate)> {
    cfg.validate()?;
    let manifest =
        ExperimentManifest::new("sweep", cfg, cfg.sweep.n_values.clone(), cfg.sweep.replicas, cfg.sweep.base_seed);
    manifest.write(out_dir)?;
    let writer = RowWriter::create(&out_dir.join(ROWS_FILE))?;
    let hash = manifest.hash.as_str();

    let mut rows = with_workers(workers, || -> Result<Vec<SweepRow>> {
        let mut rows = Vec::new();
        for &n in &cfg.sweep.n_values {
            let spec = cfg.kernel_for(n)?;
            let reference = reference_flow(cfg, &spec)?;
            let batch: Vec<SweepRow> = (0..cfg.sweep.replicas)
                .into_par_iter()
                .map(|r| {
                    let row = run_cell(cfg, hash, &spec, &reference, r)?;
                    writer.push(&row)?;
                    Ok(row)
                })
                .collect::<Result<_>>()?;
            rows.extend(batch);
        }
        Ok(rows)
    })??;
    rows.sort_by_key(|r| (r.n, r.replica));
    let agg = aggregate(&rows, hash, cfg.sweep.fit_seed, cfg.sweep_is_full())?;
    write_json(&out_dir.join(AGGREGATE_FILE), &agg)?;
    Ok((rows, agg))
}

/// Per-N statistics, chaos table and exponent fit. Rows are sorted by
/// `(N, replica)` first so the result does not depend on row order.
pub fn aggregate(rows: &[SweepRow], manifest_hash: &str, fit_seed: u64, full_grid: bool) -> Result<SweepAggregate> {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.n, r.replica));
    let mut groups: BTreeMap<usize, Vec<&SweepRow>> = BTreeMap::new();
    for r in sorted {
        groups.entry(r.n).or_default().push(r);
    }
    let per_n: Vec<PerN> = groups
        .iter()
        .map(|(&n, g)| {
            let k = g.len() as f64;
            let med = |f: fn(&SweepRow) -> f64| median(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            let mean = |f: fn(&SweepRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / k;
            PerN {
                n,
                replicas: g.len(),
                exceedance_fraction: g.iter().filter(|r| r.exceeded).count() as f64 / k,
                median_sup_weighted: med(|r| r.sup_weighted),
                median_sup_d1: med(|r| r.sup_d1),
                median_sup_d2: med(|r| r.sup_d2),
                median_j_t: med(|r| r.j_t),
                mean_frac_in_b: mean(|r| r.frac_in_b),
                mean_frac_in_c: mean(|r| r.frac_in_c),
                median_w1_final: med(|r| r.w1_final),
                median_w1_proxy: med(|r| r.w1_proxy),
                j_invariants_hold: g.iter().all(|r| r.j_invariants_hold()),
            }
        })
        .collect();
    let sups: Vec<f64> = per_n.iter().map(|p| p.median_sup_weighted).collect();
    let exc: Vec<f64> = per_n.iter().map(|p| p.exceedance_fraction).collect();

    let chaos = if groups.values().all(|g| g.len() >= MIN_CHAOS_REPLICAS) && !groups.is_empty() {
        let input: Vec<(usize, Vec<ObservableMoments>)> =
            groups.iter().map(|(&n, g)| (n, g.iter().map(|r| r.chaos.clone()).collect())).collect();
        Some(chaos_decay(&input).map_err(HarnessError::sim)?)
    } else {
        None
    };
    let chaos_nonincreasing =
        chaos.as_ref().map(|c| is_nonincreasing(&c.iter().map(|r| r.median_abs_correlation).collect::<Vec<_>>()));
    let fit = if groups.len() >= MIN_FIT_N {
        // sorted rows: the bootstrap draws by position within each N
        let pts: Vec<FitPoint> = groups
            .values()
            .flatten()
            .map(|r| FitPoint { n: r.n, sup_weighted: r.sup_weighted, beta: Some(r.beta) })
            .collect();
        Some(fit_rows(&pts, BOOTSTRAP_RESAMPLES, fit_seed)?)
    } else {
        None
    };
    Ok(SweepAggregate {
        manifest_hash: manifest_hash.to_string(),
        per_n,
        median_sup_weighted_strictly_decreasing: sups.windows(2).all(|w| w[1] < w[0]),
        exceedance_nonincreasing: is_nonincreasing(&exc),
        chaos,
        chaos_nonincreasing,
        fit,
        full_grid,
    })
}

/// Re-runs one cell from a manifest.
pub fn reproduce_cell(manifest: &ExperimentManifest, n: usize, replica: usize, workers: usize) -> Result<SweepRow> {
    manifest.verify()?;
    let cfg = &manifest.config;
    if !manifest.n_grid.contains(&n) || replica >= manifest.replicas {
        return Err(HarnessError::Config(format!(
            "cell (N = {n}, replica = {replica}) is not part of the manifest grid"
        )));
    }
    with_workers(workers, || {
        let spec = cfg.kernel_for(n)?;
        let reference = reference_flow(cfg, &spec)?;
        run_cell(cfg, &manifest.hash, &spec, &reference, replica)
    })?
}

pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let f = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if !line.trim().is_empty() {
            rows.push(
                serde_json::from_str(&line)
                    .map_err(|e| HarnessError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?,
            );
        }
    }
    Ok(rows)
}
