//! Cross-module invariant suites behind `chaoslab validate`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::run::{coupled_run, reference_flow};
use super::{HarnessError, Result};
use crate::geom::{self, Vec3};
use crate::kernel::{check_antisymmetry, check_domination, check_lipschitz, KernelMutation, KernelSpec};
use crate::nbody::{hamiltonian, run_flow, total_force_at, ForceMode, ForceOptions, NewtonianFlowConfig};
use crate::sampling::{derive_seed, rng_from_seed, sample_ensemble};
use crate::transport::{coupling_bounds, dist6, w1_exact, EmpiricalMeasure, Point6};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidateOptions {
    /// Bound on `|H_T - H_0| / max(|H_0|, 1)`.
    pub energy_tolerance: f64,
    /// Step of the energy run; omitted means the kernel default.
    pub energy_dt: Option<f64>,
    pub momentum_tolerance: f64,
    /// Samples per kernel inequality and kernel.
    pub kernel_samples: usize,
    /// Random configurations in the cell-list comparison.
    pub force_configs: usize,
    pub seed: u64,
    /// Test hook: deliberately broken force.
    #[serde(skip)]
    pub mutation: Option<KernelMutation>,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            energy_tolerance: 1e-4,
            energy_dt: None,
            momentum_tolerance: 1e-10,
            kernel_samples: 20_000,
            force_configs: 20,
            seed: 11,
            mutation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn suite(name: &str, passed: bool, detail: String) -> SuiteResult {
    SuiteResult { name: name.to_string(), passed, detail }
}

struct Ctx<'a> {
    cfg: &'a Config,
    opts: &'a ValidateOptions,
}

impl Ctx<'_> {
    fn kernel(&self, beta: f64, n: usize) -> Result<KernelSpec> {
        let k = KernelSpec::new(self.cfg.kernel.profile(), beta, n, None)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(match self.opts.mutation {
            Some(m) => k.with_mutation(m),
            None => k,
        })
    }

    /// `(beta, N)` pairs of the kernel suites: the configured `beta` and
    /// the unscaled kernel, each at a small and a large `N`.
    fn kernels(&self) -> Result<Vec<KernelSpec>> {
        let mut betas = vec![0.0, self.cfg.kernel.beta];
        betas.dedup();
        let mut out = Vec::new();
        for b in betas {
            for n in [64, 2048] {
                out.push(self.kernel(b, n)?);
            }
        }
        Ok(out)
    }
}

fn kernel_lipschitz(c: &Ctx) -> Result<SuiteResult> {
    let (mut bad, mut worst, mut total) = (0, 0.0f64, 0);
    for (i, k) in c.kernels()?.iter().enumerate() {
        let r = check_lipschitz(k, c.opts.kernel_samples, derive_seed(c.opts.seed, &[1, i as u64]));
        bad += r.violations;
        worst = worst.max(r.worst_ratio);
        total += r.samples;
    }
    Ok(suite("kernel-lipschitz", bad == 0, format!("{bad} violations in {total} samples, worst ratio {worst:.4}")))
}

fn kernel_domination(c: &Ctx) -> Result<SuiteResult> {
    let alpha = c.cfg.coupling.alpha;
    let (mut bad, mut worst, mut total) = (0, 0.0f64, 0);
    for (i, k) in c.kernels()?.iter().enumerate() {
        let r = check_domination(k, alpha, c.opts.kernel_samples, derive_seed(c.opts.seed, &[2, i as u64]))
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        bad += r.violations;
        worst = worst.max(r.worst_ratio);
        total += r.samples;
    }
    Ok(suite("kernel-domination", bad == 0, format!("{bad} violations in {total} samples, worst ratio {worst:.4}")))
}

fn force_antisymmetry(c: &Ctx) -> Result<SuiteResult> {
    let (mut bad, mut total) = (0, 0);
    for (i, k) in c.kernels()?.iter().enumerate() {
        let r = check_antisymmetry(k, c.opts.kernel_samples / 10, derive_seed(c.opts.seed, &[3, i as u64]));
        bad += r.violations;
        total += r.samples;
    }
    Ok(suite("force-antisymmetry", bad == 0, format!("{bad} of {total} samples with f(-q) != -f(q)")))
}

fn max_rel_diff(a: &[Vec3], b: &[Vec3]) -> f64 {
    let scale = b.iter().map(|v| geom::norm(*v)).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    a.iter().zip(b).map(|(x, y)| geom::norm(geom::sub(*x, *y))).fold(0.0, f64::max) / scale
}

fn cell_list(c: &Ctx) -> Result<SuiteResult> {
    let mut rng = rng_from_seed(derive_seed(c.opts.seed, &[4]));
    let mut worst = 0.0f64;
    for i in 0..c.opts.force_configs {
        let n = rng.random_range(2..=2048usize);
        let beta = if i % 2 == 0 { 0.0 } else { c.cfg.kernel.beta };
        let k = c.kernel(beta, n)?;
        let e = sample_ensemble(&c.cfg.initial, n, rng.random()).map_err(HarnessError::sim)?;
        let fast = total_force_at(&e.positions, &k, ForceOptions::default()).map_err(HarnessError::sim)?;
        let slow = total_force_at(&e.positions, &k, ForceOptions { mode: ForceMode::BruteForce, deterministic: true })
            .map_err(HarnessError::sim)?;
        worst = worst.max(max_rel_diff(&fast, &slow));
    }
    Ok(suite(
        "cell-list-vs-brute-force",
        worst <= 1e-12,
        format!("max relative discrepancy {worst:.3e} over {} configurations", c.opts.force_configs),
    ))
}

/// Energy and momentum drift of one velocity-Verlet run, N = 512, T = 1.
fn conservation(c: &Ctx) -> Result<(SuiteResult, SuiteResult)> {
    let n = 512;
    let k = c.kernel(c.cfg.kernel.beta, n)?;
    let e0 = sample_ensemble(&c.cfg.initial, n, derive_seed(c.opts.seed, &[5])).map_err(HarnessError::sim)?;
    let flow = NewtonianFlowConfig { t_end: 1.0, dt: c.opts.energy_dt, ..Default::default() };
    let (steps, dt) = flow.resolve_steps(&k);
    let h0 = hamiltonian(&e0, &k);
    let p0 = e0.total_momentum();
    let tr = run_flow(e0, &flow, &k, &mut []).map_err(HarnessError::sim)?;
    let e1 = &tr.final_state.ensemble;
    let drift = (hamiltonian(e1, &k) - h0).abs() / h0.abs().max(1.0);
    let dp = geom::norm_inf(geom::sub(e1.total_momentum(), p0));
    let tol = c.opts.energy_tolerance;
    Ok((
        suite(
            "energy-drift",
            drift <= tol,
            format!("relative drift {drift:.3e} (tolerance {tol:.1e}, {steps} steps of {dt})"),
        ),
        suite(
            "momentum-conservation",
            dp <= c.opts.momentum_tolerance,
            format!("total momentum drift {dp:.3e} (tolerance {:.1e})", c.opts.momentum_tolerance),
        ),
    ))
}

fn j_monotonicity(c: &Ctx) -> Result<SuiteResult> {
    let mut cfg = c.cfg.clone();
    cfg.nbody.t_end = 0.5;
    let k = c.kernel(cfg.kernel.beta, 64)?;
    let reference = reference_flow(&cfg, &k)?;
    let mut bad = 0;
    let mut steps = 0;
    for r in 0..4u64 {
        let tr = coupled_run(&cfg, &k, &reference, derive_seed(c.opts.seed, &[6, r]))?;
        let rec = &tr.records;
        steps += rec.len();
        bad += rec.windows(2).filter(|w| w[1].j < w[0].j).count();
        bad += rec.iter().filter(|s| !(s.j > 0.0 && s.j <= 1.0) || (s.j == 1.0) != s.in_a).count();
    }
    Ok(suite("j-monotonicity", bad == 0, format!("{bad} violations over {steps} recorded steps")))
}

fn permutation_minimum(a: &[Point6], b: &[Point6]) -> f64 {
    fn go(k: usize, perm: &mut Vec<usize>, a: &[Point6], b: &[Point6], best: &mut f64) {
        if k == perm.len() {
            let cost: f64 = perm.iter().enumerate().map(|(i, &j)| dist6(&a[i], &b[j])).sum();
            *best = best.min(cost / a.len() as f64);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            go(k + 1, perm, a, b, best);
            perm.swap(k, i);
        }
    }
    let mut best = f64::INFINITY;
    go(0, &mut (0..a.len()).collect(), a, b, &mut best);
    best
}

fn transport_axioms(c: &Ctx) -> Result<SuiteResult> {
    let mut rng = rng_from_seed(derive_seed(c.opts.seed, &[7]));
    let mut random = |n: usize| -> Result<EmpiricalMeasure> {
        let pts = (0..n).map(|_| std::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0)).collect();
        EmpiricalMeasure::new(pts).map_err(HarnessError::sim)
    };
    let w = |a: &EmpiricalMeasure, b: &EmpiricalMeasure| w1_exact(a, b).map_err(HarnessError::sim);
    let mut failures = Vec::new();
    for _ in 0..10 {
        let (a, b, x) = (random(24)?, random(24)?, random(24)?);
        if w(&a, &a)? != 0.0 {
            failures.push("identity");
        }
        if w(&a, &b)? != w(&b, &a)? {
            failures.push("symmetry");
        }
        if w(&a, &x)? > (w(&a, &b)? + w(&b, &x)?) * (1.0 + 1e-12) {
            failures.push("triangle");
        }
        if w(&a, &b)? > coupling_bounds(&a, &b).map_err(HarnessError::sim)?.w1_upper * (1.0 + 1e-12) {
            failures.push("index-coupling bound");
        }
        let (s, t) = (random(5)?, random(5)?);
        if (w(&s, &t)? - permutation_minimum(s.points(), t.points())).abs() > 1e-12 {
            failures.push("exhaustive minimum");
        }
    }
    failures.dedup();
    let detail = if failures.is_empty() {
        "identity, symmetry, triangle, coupling bound, n = 5 exhaustive".into()
    } else {
        failures.join(", ")
    };
    Ok(suite("transport-metric-axioms", failures.is_empty(), detail))
}

/// All suites in a fixed order.
pub fn run_validation(cfg: &Config, opts: &ValidateOptions) -> Result<Vec<SuiteResult>> {
    let c = Ctx { cfg, opts };
    let (energy, momentum) = conservation(&c)?;
    Ok(vec![
        kernel_lipschitz(&c)?,
        kernel_domination(&c)?,
        force_antisymmetry(&c)?,
        cell_list(&c)?,
        energy,
        momentum,
        j_monotonicity(&c)?,
        transport_axioms(&c)?,
    ])
}

pub fn format_table(results: &[SuiteResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:<6}  detail\n", "suite", "result");
    for r in results {
        s += &format!("{:<width$}  {:<6}  {}\n", r.name, if r.passed { "pass" } else { "FAIL" }, r.detail);
    }
    s
}
