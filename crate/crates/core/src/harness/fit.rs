//! Power-law fit of the per-N median sup distance with a bootstrap CI.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::sampling::rng_from_seed;
use crate::stats::{median, ols};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const MIN_FIT_N: usize = 3;

/// The columns of a sweep row the fit reads; other columns are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    #[serde(rename = "N")]
    pub n: usize,
    pub sup_weighted: f64,
    #[serde(default)]
    pub beta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    #[serde(rename = "N")]
    pub n_values: Vec<usize>,
    pub replicas: Vec<usize>,
    pub median_sup_weighted: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub resamples: usize,
    pub bootstrap_seed: u64,
    /// `-slope`.
    pub implied_alpha: f64,
    pub ci_excludes_zero: bool,
    pub prediction: String,
}

/// Reads every line of a JSONL sweep table.
pub fn read_points(path: &Path) -> Result<Vec<FitPoint>> {
    let f =
        std::fs::File::open(path).map_err(|e| HarnessError::Config(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: FitPoint = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(p);
    }
    Ok(out)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // linear interpolation between order statistics
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// OLS of `ln median(sup_weighted)` on `ln N`. The CI resamples replicas
/// with replacement within each `N`.
pub fn fit_rows(points: &[FitPoint], resamples: usize, seed: u64) -> Result<FitReport> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for p in points {
        groups.entry(p.n).or_default().push(p.sup_weighted);
    }
    if groups.len() < MIN_FIT_N {
        return Err(HarnessError::InsufficientData(format!(
            "{} distinct N values, the fit needs at least {MIN_FIT_N}",
            groups.len()
        )));
    }
    if let Some(v) = points.iter().map(|p| p.sup_weighted).find(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(HarnessError::InsufficientData(format!("sup_weighted = {v} has no logarithm")));
    }
    let n_values: Vec<usize> = groups.keys().copied().collect();
    let x: Vec<f64> = n_values.iter().map(|&n| (n as f64).ln()).collect();
    let medians: Vec<f64> = groups.values().map(|v| median(v)).collect();
    let y: Vec<f64> = medians.iter().map(|m| m.ln()).collect();
    let line = ols(&x, &y).ok_or_else(|| HarnessError::InsufficientData("degenerate N grid".into()))?;

    let mut rng = rng_from_seed(seed);
    let mut slopes = Vec::with_capacity(resamples);
    let mut buf = Vec::new();
    for _ in 0..resamples {
        let yb: Vec<f64> = groups
            .values()
            .map(|v| {
                buf.clear();
                buf.extend((0..v.len()).map(|_| v[rng.random_range(0..v.len())]));
                median(&buf).ln()
            })
            .collect();
        slopes.push(ols(&x, &yb).expect("same grid as the point fit").slope);
    }
    slopes.sort_by(f64::total_cmp);
    let ci_level = 0.95;
    let (ci_low, ci_high) = if slopes.is_empty() {
        (line.slope, line.slope)
    } else {
        (percentile(&slopes, (1.0 - ci_level) / 2.0), percentile(&slopes, (1.0 + ci_level) / 2.0))
    };
    let betas: Vec<f64> = points.iter().filter_map(|p| p.beta).collect();
    let beta_note = match betas.first() {
        Some(b) if betas.iter().all(|x| x == b) => format!("beta = {b}"),
        _ => "beta".to_string(),
    };
    let implied_alpha = -line.slope;
    let prediction = format!(
        "predicted: the sup distance decays at least like N^-alpha for every alpha < {beta_note}; \
         fitted decay exponent {implied_alpha:.4} (95% CI [{:.4}, {:.4}])",
        -ci_high, -ci_low
    );
    Ok(FitReport {
        replicas: groups.values().map(Vec::len).collect(),
        n_values,
        median_sup_weighted: medians,
        slope: line.slope,
        intercept: line.intercept,
        r2: line.r2,
        ci_low,
        ci_high,
        ci_level,
        resamples,
        bootstrap_seed: seed,
        implied_alpha,
        ci_excludes_zero: ci_high < 0.0 || ci_low > 0.0,
        prediction,
    })
}
