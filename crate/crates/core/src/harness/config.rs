//! Sectioned TOML experiment config. Every section and key is optional;
//! missing ones take the pinned default profile.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::coupling::CouplingParams;
use crate::kernel::{BaseProfile, KernelSpec, ProfileShape, BETA_MAX};
use crate::meanfield::MeanFieldConfig;
use crate::nbody::NewtonianFlowConfig;
use crate::sampling::InitialDensity;
use crate::transport::W1_MAX_POINTS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub shape: ProfileShape,
    pub support_radius: f64,
    pub amplitude: f64,
    pub beta: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        let p = BaseProfile::default();
        Self { shape: p.shape, support_radius: p.support_radius, amplitude: p.amplitude, beta: 0.1 }
    }
}

impl KernelSection {
    pub fn profile(&self) -> BaseProfile {
        BaseProfile { shape: self.shape, support_radius: self.support_radius, amplitude: self.amplitude }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub n: usize,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { n: 512, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub n_values: Vec<usize>,
    pub replicas: usize,
    pub base_seed: u64,
    /// Size of the index-matched subsample used for the final `W_1`.
    pub w1_points: usize,
    /// Seed of the bootstrap in the exponent fit.
    pub fit_seed: u64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { n_values: vec![128, 512, 2048], replicas: 20, base_seed: 2024, w1_points: 512, fit_seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlnSection {
    pub n_values: Vec<usize>,
    pub replicas: usize,
    pub base_seed: u64,
    /// Measure at `T/2` after transport by the mean-field flow instead of
    /// at time 0.
    pub evolved: bool,
    /// Multiplier on the set thresholds when counting exceedances.
    pub c_gamma: f64,
}

impl Default for LlnSection {
    fn default() -> Self {
        Self { n_values: vec![256, 1024, 4096], replicas: 50, base_seed: 4242, evolved: false, c_gamma: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Per-step CSV of single runs.
    pub write_steps: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: PathBuf::from("out"), write_steps: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub kernel: KernelSection,
    pub initial: InitialDensity,
    pub nbody: NewtonianFlowConfig,
    pub meanfield: MeanFieldConfig,
    pub coupling: CouplingParams,
    pub run: RunSection,
    pub sweep: SweepSection,
    pub lln: LlnSection,
    pub output: OutputSection,
}

fn config_err(key: &str, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{key}: {msg}"))
}

fn check_n_values(key: &str, values: &[usize]) -> Result<()> {
    if values.is_empty() {
        return Err(config_err(key, "needs at least one value"));
    }
    if let Some(n) = values.iter().find(|&&n| n < 4) {
        return Err(config_err(key, format!("N = {n} is too small, need N >= 4")));
    }
    if values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(config_err(key, "values must be strictly increasing"));
    }
    Ok(())
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.kernel;
        self.kernel.profile().validate().map_err(|e| config_err("kernel", e))?;
        let beta = k.beta;
        if !(beta.is_finite() && (0.0..BETA_MAX).contains(&beta)) {
            return Err(config_err("kernel.beta", format!("{beta} violates the bound 0 <= beta < 1/7")));
        }
        let c = &self.coupling;
        if !(c.alpha.is_finite() && c.alpha > 0.0) {
            return Err(config_err("coupling.alpha", format!("{} must be positive", c.alpha)));
        }
        if beta > 0.0 && c.alpha >= beta {
            return Err(config_err(
                "coupling.alpha",
                format!("{} violates 0 < alpha < beta with kernel.beta = {beta}", c.alpha),
            ));
        }
        if !(c.lambda.is_finite() && c.lambda > 0.0) {
            return Err(config_err("coupling.lambda", format!("{} must be positive", c.lambda)));
        }
        if !(c.gamma.is_finite() && c.gamma > 0.0) {
            return Err(config_err("coupling.gamma", format!("{} must be positive", c.gamma)));
        }
        self.initial.validate().map_err(|e| config_err("initial", e))?;
        self.nbody.validate().map_err(|e| config_err("nbody", e))?;
        self.meanfield.validate().map_err(|e| config_err("meanfield", e))?;
        if self.run.n < 4 {
            return Err(config_err("run.n", format!("{} is too small, need N >= 4", self.run.n)));
        }
        check_n_values("sweep.n_values", &self.sweep.n_values)?;
        if self.sweep.replicas == 0 {
            return Err(config_err("sweep.replicas", "must be at least 1"));
        }
        if !(1..=W1_MAX_POINTS).contains(&self.sweep.w1_points) {
            return Err(config_err("sweep.w1_points", format!("must lie in 1..={W1_MAX_POINTS}")));
        }
        check_n_values("lln.n_values", &self.lln.n_values)?;
        if self.lln.replicas < 2 {
            return Err(config_err("lln.replicas", "must be at least 2"));
        }
        if !(self.lln.c_gamma.is_finite() && self.lln.c_gamma > 0.0) {
            return Err(config_err("lln.c_gamma", format!("{} must be positive", self.lln.c_gamma)));
        }
        Ok(())
    }

    /// Kernel for `n` particles.
    pub fn kernel_for(&self, n: usize) -> Result<KernelSpec> {
        KernelSpec::new(self.kernel.profile(), self.kernel.beta, n, None).map_err(|e| config_err("kernel", e))
    }

    /// Sweep precondition of the main experiment: at least 3 N values and
    /// 10 replicas. Smaller grids still run; callers report this.
    pub fn sweep_is_full(&self) -> bool {
        self.sweep.n_values.len() >= 3 && self.sweep.replicas >= 10
    }
}
