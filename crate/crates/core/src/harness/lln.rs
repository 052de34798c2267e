//! Law-of-large-numbers fluctuation sweep over `N`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::manifest::ExperimentManifest;
use super::run::reference_flow;
use super::{with_workers, write_json, HarnessError, Result};
use crate::geom;
use crate::sampling::{derive_seed, sample_ensemble};
use crate::stats::{
    expectation_from_reference, fluctuation_statistics, is_nonincreasing, threshold_exceedance, variance_scaling_fit,
    ExceedanceRow, Expectation, FluctuationRecord, RadialExpectation, VarianceFit,
};

pub const RECORDS_FILE: &str = "fluctuations.jsonl";
pub const REPORT_FILE: &str = "lln_report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlnReport {
    pub manifest_hash: String,
    pub beta: f64,
    pub t: f64,
    pub evolved: bool,
    pub c_gamma: f64,
    /// Absent when the grid is too small for a fit.
    pub variance_fit: Option<VarianceFit>,
    pub fit_note: Option<String>,
    /// `5 beta` and `7 beta`.
    pub expected_exponent_f: f64,
    pub expected_exponent_g: f64,
    pub exceedance: Vec<ExceedanceRow>,
    #[serde(rename = "frac_B_nonincreasing")]
    pub frac_b_nonincreasing: bool,
    #[serde(rename = "frac_C_nonincreasing")]
    pub frac_c_nonincreasing: bool,
    /// Share of records whose tagged-particle means pass the centring check.
    pub centred_fraction: f64,
}

/// Records for every `(N, replica)`, sorted, at time 0 against the exact
/// expectation or, with `lln.evolved`, at `T/2` against the field of the
/// evolved reference ensemble.
pub fn lln_records(cfg: &Config) -> Result<Vec<FluctuationRecord>> {
    let mut out = Vec::new();
    for &n in &cfg.lln.n_values {
        let spec = cfg.kernel_for(n)?;
        let seed = |r: usize| derive_seed(cfg.lln.base_seed, &[n as u64, r as u64]);
        let batch: Vec<FluctuationRecord> = if cfg.lln.evolved {
            let mut half = cfg.clone();
            half.nbody.t_end = 0.5 * cfg.nbody.t_end;
            let flow = reference_flow(&half, &spec)?;
            let tracers: Vec<_> = (0..cfg.lln.replicas)
                .into_par_iter()
                .map(|r| {
                    let x0 = sample_ensemble(&cfg.initial, n, seed(r)).map_err(HarnessError::sim)?;
                    let mut st = flow.start_tracers(x0).map_err(HarnessError::sim)?;
                    for _ in 0..flow.n_steps() {
                        flow.advance_tracers(&mut st).map_err(HarnessError::sim)?;
                    }
                    Ok(st.ensemble)
                })
                .collect::<Result<_>>()?;
            let cover = tracers
                .iter()
                .flat_map(|e: &crate::sampling::ParticleEnsemble| e.positions.iter())
                .map(|q| geom::norm_inf(*q))
                .fold(0.0, f64::max);
            let snap = flow.snapshot(flow.n_steps());
            let field =
                Expectation::Grid(expectation_from_reference(snap, &spec, None, cover).map_err(HarnessError::sim)?);
            tracers
                .par_iter()
                .map(|e| fluctuation_statistics(e, &field, &spec).map_err(HarnessError::sim))
                .collect::<Result<_>>()?
        } else {
            let field = Expectation::Radial(RadialExpectation::new(&cfg.initial.spatial, &spec));
            (0..cfg.lln.replicas)
                .into_par_iter()
                .map(|r| {
                    let x0 = sample_ensemble(&cfg.initial, n, seed(r)).map_err(HarnessError::sim)?;
                    fluctuation_statistics(&x0, &field, &spec).map_err(HarnessError::sim)
                })
                .collect::<Result<_>>()?
        };
        out.extend(batch);
    }
    Ok(out)
}

pub fn lln_report(cfg: &Config, records: &[FluctuationRecord], manifest_hash: &str) -> LlnReport {
    let (variance_fit, fit_note) = match variance_scaling_fit(records) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let exceedance = threshold_exceedance(records, cfg.lln.c_gamma);
    let fb: Vec<f64> = exceedance.iter().map(|r| r.frac_b).collect();
    let fc: Vec<f64> = exceedance.iter().map(|r| r.frac_c).collect();
    let beta = cfg.kernel.beta;
    LlnReport {
        manifest_hash: manifest_hash.to_string(),
        beta,
        t: if cfg.lln.evolved { 0.5 * cfg.nbody.t_end } else { 0.0 },
        evolved: cfg.lln.evolved,
        c_gamma: cfg.lln.c_gamma,
        variance_fit,
        fit_note,
        expected_exponent_f: 5.0 * beta,
        expected_exponent_g: 7.0 * beta,
        exceedance,
        frac_b_nonincreasing: is_nonincreasing(&fb),
        frac_c_nonincreasing: is_nonincreasing(&fc),
        centred_fraction: records.iter().filter(|r| r.is_centred()).count() as f64 / records.len().max(1) as f64,
    }
}

/// Manifest, JSONL records and the report JSON.
pub fn run_lln(cfg: &Config, out_dir: &Path, workers: usize) -> Result<(Vec<FluctuationRecord>, LlnReport)> {
    cfg.validate()?;
    let manifest = ExperimentManifest::new("lln", cfg, cfg.lln.n_values.clone(), cfg.lln.replicas, cfg.lln.base_seed);
    manifest.write(out_dir)?;
    let records = with_workers(workers, || lln_records(cfg))??;
    let path = out_dir.join(RECORDS_FILE);
    let f = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    let mut w = BufWriter::new(f);
    for r in &records {
        serde_json::to_writer(&mut w, r).map_err(HarnessError::sim)?;
        w.write_all(b"\n").map_err(|e| HarnessError::io(&path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;
    let report = lln_report(cfg, &records, &manifest.hash);
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    Ok((records, report))
}
