//! Newtonian N-particle flow with the `1/N`-weighted scaled pair force.
//!
//! The acceleration of particle `j` is `F_j = -(1/N) sum_{i != j} f_N(q_j - q_i)`,
//! i.e. minus the gradient of the pair potential `sum_{j<k} phi_N(q_j - q_k)`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::CellGrid;
use crate::geom::{self, Vec3, ZERO};
use crate::kernel::KernelSpec;
use crate::sampling::ParticleEnsemble;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NbodyError {
    #[error("ensemble has {found} particles but the kernel is scaled for N = {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite coordinate after step {step}")]
    NonFiniteState { step: usize },
    #[error("invalid flow configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    #[default]
    VelocityVerlet,
    Rk4,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForceMode {
    #[default]
    CellList,
    BruteForce,
}

/// How pair sums are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForceOptions {
    pub mode: ForceMode,
    /// Fixed summation order, bitwise independent of the worker count.
    pub deterministic: bool,
}

impl Default for ForceOptions {
    fn default() -> Self {
        Self { mode: ForceMode::CellList, deterministic: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonianFlowConfig {
    /// Requested step; omitted means the kernel-dependent default.
    pub dt: Option<f64>,
    pub t_end: f64,
    pub integrator: Integrator,
    pub force_mode: ForceMode,
    pub deterministic_reduction: bool,
    /// Keep a snapshot every this many steps; 0 keeps only the initial and
    /// final states.
    pub snapshot_stride: usize,
}

impl Default for NewtonianFlowConfig {
    fn default() -> Self {
        Self {
            dt: None,
            t_end: 0.5,
            integrator: Integrator::VelocityVerlet,
            force_mode: ForceMode::CellList,
            deterministic_reduction: true,
            snapshot_stride: 0,
        }
    }
}

/// `min(0.05, 0.2 / sqrt(max(L N^(5 beta - 1), 1)))`.
pub fn default_dt(spec: &KernelSpec) -> f64 {
    let n = spec.n_particles() as f64;
    let stiff = spec.lipschitz() * n.powf(5.0 * spec.beta() - 1.0);
    0.05f64.min(0.2 / stiff.max(1.0).sqrt())
}

/// Number of steps covering `[0, t_end]` and the step that makes them fit.
pub fn step_grid(t_end: f64, dt_requested: f64) -> (usize, f64) {
    if t_end == 0.0 {
        return (0, dt_requested);
    }
    // guard against T/dt landing a hair above an integer
    let n = ((t_end / dt_requested) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    (n, t_end / n as f64)
}

impl NewtonianFlowConfig {
    pub fn validate(&self) -> Result<(), NbodyError> {
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(NbodyError::InvalidConfig(format!("t_end must be >= 0, got {}", self.t_end)));
        }
        if let Some(dt) = self.dt {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(NbodyError::InvalidConfig(format!("dt must be > 0, got {dt}")));
            }
        }
        Ok(())
    }

    /// `(steps, dt)` with `steps * dt = t_end`.
    pub fn resolve_steps(&self, spec: &KernelSpec) -> (usize, f64) {
        step_grid(self.t_end, self.dt.unwrap_or_else(|| default_dt(spec)))
    }

    pub fn force_options(&self) -> ForceOptions {
        ForceOptions { mode: self.force_mode, deterministic: self.deterministic_reduction }
    }
}

pub(crate) trait Accum: Copy + Send + Sync {
    const ZERO: Self;
    fn acc(self, other: Self) -> Self;
}

impl Accum for Vec3 {
    const ZERO: Self = ZERO;
    #[inline]
    fn acc(self, o: Self) -> Self {
        geom::add(self, o)
    }
}

impl Accum for f64 {
    const ZERO: Self = 0.0;
    #[inline]
    fn acc(self, o: Self) -> Self {
        self + o
    }
}

/// For each query `q_j`, the sum `sum_i eval(q_j - s_i)` over sources within
/// `range`. With `skip_self` the term `i == j` is left out (queries and
/// sources are then the same array). `grid` of `None` means the plain
/// double loop in ascending `i`; otherwise candidates are visited in
/// ascending `(cell, index)` order. Either way each query's sum has a fixed
/// order, so the output does not depend on the worker count.
pub(crate) fn gather_sum<A: Accum>(
    queries: &[Vec3],
    sources: &[Vec3],
    grid: Option<&CellGrid>,
    range: f64,
    skip_self: bool,
    eval: impl Fn(Vec3) -> A + Sync,
) -> Vec<A> {
    let one = |j: usize, q: Vec3| {
        let mut acc = A::ZERO;
        match grid {
            Some(g) => g.for_each_candidate(q, range, |i| {
                if !(skip_self && i == j) {
                    acc = acc.acc(eval(geom::sub(q, sources[i])));
                }
            }),
            None => {
                for (i, s) in sources.iter().enumerate() {
                    if !(skip_self && i == j) {
                        acc = acc.acc(eval(geom::sub(q, *s)));
                    }
                }
            }
        }
        acc
    };
    queries.par_iter().enumerate().with_min_len(64).map(|(j, q)| one(j, *q)).collect()
}

/// `sum_{i != j} f(q_j - q_i)` by a half-stencil pair loop with per-worker
/// accumulators. Faster but the rounding depends on the work split.
fn pairwise_force_sum(positions: &[Vec3], spec: &KernelSpec) -> Vec<Vec3> {
    let n = positions.len();
    let grid = CellGrid::build(positions, spec.scaled_support());
    (0..grid.n_cells())
        .into_par_iter()
        .with_min_len(16)
        .fold(
            || vec![ZERO; n],
            |mut acc, c| {
                for c2 in grid.upper_neighbours(c) {
                    for &i in grid.members(c) {
                        for &j in grid.members(c2) {
                            if c2 == c && j <= i {
                                continue;
                            }
                            let f = spec.eval_force(geom::sub(positions[i], positions[j]));
                            if f != ZERO {
                                // f_N is odd: f(q_j - q_i) = -f(q_i - q_j)
                                acc[i] = geom::add(acc[i], f);
                                acc[j] = geom::sub(acc[j], f);
                            }
                        }
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![ZERO; n],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x = geom::add(*x, y);
                }
                a
            },
        )
}

/// `-(w) sum_{i != j} f_N(q_j - q_i)` for every `j`.
pub(crate) fn self_force(positions: &[Vec3], spec: &KernelSpec, weight: f64, opts: ForceOptions) -> Vec<Vec3> {
    let sums = match (opts.mode, opts.deterministic) {
        (ForceMode::BruteForce, _) => {
            gather_sum(positions, positions, None, f64::INFINITY, true, |d| spec.eval_force(d))
        }
        (ForceMode::CellList, true) => {
            let range = spec.scaled_support();
            let grid = CellGrid::build(positions, range);
            gather_sum(positions, positions, Some(&grid), range, true, |d| spec.eval_force(d))
        }
        (ForceMode::CellList, false) => pairwise_force_sum(positions, spec),
    };
    sums.into_iter().map(|s| geom::scale(-weight, s)).collect()
}

/// Accelerations `(F)_j = -(1/N) sum_{i != j} f_N(q_j - q_i)`.
pub fn total_force(
    ensemble: &ParticleEnsemble,
    spec: &KernelSpec,
    opts: ForceOptions,
) -> Result<Vec<Vec3>, NbodyError> {
    total_force_at(&ensemble.positions, spec, opts)
}

pub fn total_force_at(positions: &[Vec3], spec: &KernelSpec, opts: ForceOptions) -> Result<Vec<Vec3>, NbodyError> {
    if positions.len() != spec.n_particles() {
        return Err(NbodyError::DimensionMismatch { expected: spec.n_particles(), found: positions.len() });
    }
    Ok(self_force(positions, spec, 1.0 / spec.n_particles() as f64, opts))
}

/// `(G)_j = (1/N) sum_{i != j} g_N(q_j - q_i)`. `g_N` is a multiple of
/// the indicator of a closed ball, so this is a neighbour count.
pub fn total_g(positions: &[Vec3], spec: &KernelSpec, opts: ForceOptions) -> Vec<f64> {
    let r = spec.g_radius();
    let r2 = r * r;
    let w = spec.g_amplitude() / positions.len() as f64;
    let counts: Vec<usize> = match opts.mode {
        ForceMode::BruteForce => positions
            .par_iter()
            .enumerate()
            .map(|(j, q)| {
                positions.iter().enumerate().filter(|(i, p)| *i != j && geom::norm2(geom::sub(*q, **p)) <= r2).count()
            })
            .collect(),
        ForceMode::CellList => {
            let grid = CellGrid::build(positions, spec.scaled_support());
            positions
                .par_iter()
                .enumerate()
                .with_min_len(16)
                .map(|(j, q)| grid.count_in_ball(positions, *q, r, Some(j)))
                .collect()
        }
    };
    counts.into_iter().map(|c| w * c as f64).collect()
}

/// `q += dt p + dt^2/2 F`.
#[inline]
pub(crate) fn drift(q: &mut [Vec3], p: &[Vec3], f: &[Vec3], dt: f64) {
    let h = 0.5 * dt * dt;
    for ((q, p), f) in q.iter_mut().zip(p).zip(f) {
        for c in 0..3 {
            q[c] += dt * p[c] + h * f[c];
        }
    }
}

/// `p += dt/2 (F + F')`.
#[inline]
pub(crate) fn kick(p: &mut [Vec3], f_old: &[Vec3], f_new: &[Vec3], dt: f64) {
    let h = 0.5 * dt;
    for ((p, a), b) in p.iter_mut().zip(f_old).zip(f_new) {
        for c in 0..3 {
            p[c] += h * (a[c] + b[c]);
        }
    }
}

/// One velocity-Verlet step given the force at the current positions;
/// returns the force at the new positions.
pub(crate) fn verlet_step<E>(
    q: &mut [Vec3],
    p: &mut [Vec3],
    f: Vec<Vec3>,
    dt: f64,
    force: impl FnOnce(&[Vec3]) -> Result<Vec<Vec3>, E>,
) -> Result<Vec<Vec3>, E> {
    drift(q, p, &f, dt);
    let f_new = force(q)?;
    kick(p, &f, &f_new, dt);
    Ok(f_new)
}

fn rk4_step<E>(
    q: &mut [Vec3],
    p: &mut [Vec3],
    f: &[Vec3],
    dt: f64,
    mut force: impl FnMut(&[Vec3]) -> Result<Vec<Vec3>, E>,
) -> Result<Vec<Vec3>, E> {
    let shift = |base: &[Vec3], d: &[Vec3], h: f64| -> Vec<Vec3> {
        base.iter().zip(d).map(|(b, d)| geom::add(*b, geom::scale(h, *d))).collect()
    };
    let (k1q, k1p) = (p.to_vec(), f.to_vec());
    let k2q = shift(p, &k1p, 0.5 * dt);
    let k2p = force(&shift(q, &k1q, 0.5 * dt))?;
    let k3q = shift(p, &k2p, 0.5 * dt);
    let k3p = force(&shift(q, &k2q, 0.5 * dt))?;
    let k4q = shift(p, &k3p, dt);
    let k4p = force(&shift(q, &k3q, dt))?;
    let w = dt / 6.0;
    for j in 0..q.len() {
        for c in 0..3 {
            q[j][c] += w * (k1q[j][c] + 2.0 * k2q[j][c] + 2.0 * k3q[j][c] + k4q[j][c]);
            p[j][c] += w * (k1p[j][c] + 2.0 * k2p[j][c] + 2.0 * k3p[j][c] + k4p[j][c]);
        }
    }
    force(q)
}

/// Phase-space state with the accelerations at the current positions.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub ensemble: ParticleEnsemble,
    pub forces: Vec<Vec3>,
    pub step: usize,
}

impl FlowState {
    pub fn new(
        ensemble: ParticleEnsemble,
        config: &NewtonianFlowConfig,
        spec: &KernelSpec,
    ) -> Result<Self, NbodyError> {
        let forces = total_force(&ensemble, spec, config.force_options())?;
        Ok(Self { ensemble, forces, step: 0 })
    }

    /// Largest `|F_j|`.
    pub fn max_force(&self) -> f64 {
        self.forces.iter().map(|f| geom::norm(*f)).fold(0.0, f64::max)
    }
}

/// Advance by one step of `config`'s resolved `dt`.
pub fn step(state: &mut FlowState, config: &NewtonianFlowConfig, spec: &KernelSpec) -> Result<(), NbodyError> {
    let (_, dt) = config.resolve_steps(spec);
    step_dt(state, dt, config, spec)
}

pub fn step_dt(
    state: &mut FlowState,
    dt: f64,
    config: &NewtonianFlowConfig,
    spec: &KernelSpec,
) -> Result<(), NbodyError> {
    let opts = config.force_options();
    let e = &mut state.ensemble;
    let f = std::mem::take(&mut state.forces);
    let force = |q: &[Vec3]| total_force_at(q, spec, opts);
    state.forces = match config.integrator {
        Integrator::VelocityVerlet => verlet_step(&mut e.positions, &mut e.momenta, f, dt, force)?,
        Integrator::Rk4 => rk4_step(&mut e.positions, &mut e.momenta, &f, dt, force)?,
    };
    state.step += 1;
    e.time += dt;
    if !e.is_finite() || state.forces.iter().any(|f| !geom::is_finite(*f)) {
        return Err(NbodyError::NonFiniteState { step: state.step });
    }
    Ok(())
}

/// Callback invoked during [`run_flow`] at step 0, every `stride()` steps
/// and at the final step.
pub trait FlowObserver {
    fn stride(&self) -> usize {
        1
    }
    fn observe(&mut self, state: &FlowState);
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrajectory {
    pub final_state: FlowState,
    pub snapshots: Vec<ParticleEnsemble>,
    pub n_steps: usize,
    pub dt: f64,
    /// `max_t max_j |F_j(t)|` over the step grid.
    pub max_force: f64,
}

pub fn run_flow(
    ensemble0: ParticleEnsemble,
    config: &NewtonianFlowConfig,
    spec: &KernelSpec,
    observers: &mut [&mut dyn FlowObserver],
) -> Result<FlowTrajectory, NbodyError> {
    config.validate()?;
    let (n_steps, dt) = config.resolve_steps(spec);
    let mut state = FlowState::new(ensemble0, config, spec)?;
    let mut snapshots = vec![state.ensemble.clone()];
    let mut max_force = state.max_force();
    let notify = |state: &FlowState, observers: &mut [&mut dyn FlowObserver]| {
        for o in observers.iter_mut() {
            let s = o.stride().max(1);
            if state.step.is_multiple_of(s) || state.step == n_steps {
                o.observe(state);
            }
        }
    };
    notify(&state, observers);
    for k in 1..=n_steps {
        step_dt(&mut state, dt, config, spec)?;
        max_force = max_force.max(state.max_force());
        let stride = config.snapshot_stride;
        if (stride > 0 && k % stride == 0) || k == n_steps {
            snapshots.push(state.ensemble.clone());
        }
        notify(&state, observers);
    }
    Ok(FlowTrajectory { final_state: state, snapshots, n_steps, dt, max_force })
}

/// `H = sum_j |p_j|^2 / 2 + sum_{j<k} phi_N(q_j - q_k)`.
pub fn hamiltonian(ensemble: &ParticleEnsemble, spec: &KernelSpec) -> f64 {
    let kinetic: f64 = ensemble.momenta.iter().map(|p| 0.5 * geom::norm2(*p)).sum();
    let q = &ensemble.positions;
    let range = spec.scaled_support();
    let grid = CellGrid::build(q, range);
    let per: Vec<f64> = (0..q.len())
        .into_par_iter()
        .with_min_len(64)
        .map(|j| {
            let mut s = 0.0;
            grid.for_each_candidate(q[j], range, |i| {
                if i > j {
                    s += spec.eval_phi_scaled(geom::sub(q[j], q[i]));
                }
            });
            s
        })
        .collect();
    kinetic + per.iter().sum::<f64>()
}

/// Snapshots as CSV rows `t,index,qx,qy,qz,px,py,pz`.
pub fn write_snapshots_csv<W: Write>(mut w: W, snapshots: &[ParticleEnsemble]) -> std::io::Result<()> {
    writeln!(w, "t,index,qx,qy,qz,px,py,pz")?;
    for s in snapshots {
        for (i, (q, p)) in s.positions.iter().zip(&s.momenta).enumerate() {
            writeln!(w, "{},{i},{},{},{},{},{},{}", s.time, q[0], q[1], q[2], p[0], p[1], p[2])?;
        }
    }
    Ok(())
}
