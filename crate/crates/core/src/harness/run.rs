//! One coupled run end to end.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Config;
use super::manifest::ExperimentManifest;
use super::{write_json, HarnessError, Result};
use crate::coupling::{j0_closed_form, run_coupled, CoupledTrajectory, RunSummary};
use crate::kernel::KernelSpec;
use crate::meanfield::ReferenceFlow;
use crate::sampling::{derive_seed, sample_ensemble};

pub const STEPS_FILE: &str = "steps.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FINAL_PSI_FILE: &str = "final_psi.csv";
pub const FINAL_PHI_FILE: &str = "final_phi.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub manifest_hash: String,
    #[serde(flatten)]
    pub summary: RunSummary,
    #[serde(rename = "J0")]
    pub j0: f64,
    #[serde(rename = "J0_closed_form")]
    pub j0_closed_form: f64,
}

/// Reference ensemble of `ref_multiplier * N` points, seeded per `N` so
/// that every replica of one `N` shares it, evolved over `[0, T]`.
pub fn reference_flow(cfg: &Config, spec: &KernelSpec) -> Result<ReferenceFlow> {
    let n = spec.n_particles();
    let seed = derive_seed(cfg.meanfield.ref_seed, &[n as u64]);
    let r0 = sample_ensemble(&cfg.initial, cfg.meanfield.ref_multiplier * n, seed).map_err(HarnessError::sim)?;
    ReferenceFlow::evolve(r0, &cfg.nbody, &cfg.meanfield, spec).map_err(HarnessError::sim)
}

/// Coupled trajectory of the ensemble drawn with `seed`.
pub fn coupled_run(cfg: &Config, spec: &KernelSpec, reference: &ReferenceFlow, seed: u64) -> Result<CoupledTrajectory> {
    let x0 = sample_ensemble(&cfg.initial, spec.n_particles(), seed).map_err(HarnessError::sim)?;
    run_coupled(&x0, &cfg.coupling, &cfg.nbody, reference, spec).map_err(HarnessError::sim)
}

/// Writes the manifest, then the per-step CSV, the final states of both
/// flows and the summary JSON into `out_dir`.
pub fn run_single(cfg: &Config, out_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let n = cfg.run.n;
    let manifest = ExperimentManifest::new("run", cfg, vec![n], 1, cfg.run.seed);
    manifest.write(out_dir)?;

    let spec = cfg.kernel_for(n)?;
    let reference = reference_flow(cfg, &spec)?;
    let traj = coupled_run(cfg, &spec, &reference, cfg.run.seed)?;
    if cfg.output.write_steps {
        let path = out_dir.join(STEPS_FILE);
        let f = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        traj.write_csv(BufWriter::new(f)).map_err(|e| HarnessError::io(&path, e))?;
        for (name, e) in [(FINAL_PSI_FILE, &traj.final_psi), (FINAL_PHI_FILE, &traj.final_phi)] {
            let path = out_dir.join(name);
            let f = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
            e.write_csv(BufWriter::new(f)).map_err(|e| HarnessError::io(&path, e))?;
        }
    }
    let report = RunReport {
        manifest_hash: manifest.hash.clone(),
        summary: traj.summary(),
        j0: traj.records.first().map_or(f64::NAN, |r| r.j),
        j0_closed_form: j0_closed_form(n, cfg.kernel.beta, &cfg.coupling, cfg.nbody.t_end),
    };
    write_json(&out_dir.join(SUMMARY_FILE), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        let mut c = Config::default();
        c.run.n = 64;
        c.nbody.t_end = 0.1;
        c
    }

    #[test]
    fn smoke_run_writes_all_keys() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_single(&small(), dir.path()).unwrap();
        assert!((r.j0 - r.j0_closed_form).abs() <= 1e-12);
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
        for key in
            ["manifest_hash", "seed", "N", "beta", "alpha", "T", "sup_d1", "sup_d2", "sup_weighted", "J_T", "exceeded"]
        {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let csv = std::fs::read_to_string(dir.path().join(STEPS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 1 + r.summary.steps + 1);
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn repeated_run_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_single(&small(), a.path()).unwrap();
        run_single(&small(), b.path()).unwrap();
        for f in [SUMMARY_FILE, STEPS_FILE, FINAL_PSI_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }
}
