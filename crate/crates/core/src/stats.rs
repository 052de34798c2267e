//! Law-of-large-numbers statistics on i.i.d. mean-field configurations.
//!
//! For a sample `X` of `N` points drawn from `k~_t`, the tagged particle sees
//! `(F(X))_1 - (F~(X))_1 = -(1/N) sum_{j >= 2} Z_j + O(1/N)` with
//! `Z_j = f_N(q_1 - q_j) - (f_N * rho_t)(q_1)`, and likewise for `g`. The
//! expectation side is a deterministic grid quadrature, so the statistics
//! measure only the sampling fluctuation.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rayon::prelude::*;

use crate::geom::{self, Vec3, ZERO};
use crate::grid::{self, Convolver, GridGeometry};
use crate::kernel::KernelSpec;
use crate::meanfield::{GridField, MeanFieldError};
use crate::nbody::{self, ForceOptions, NbodyError};
use crate::sampling::{rng_from_seed, ParticleEnsemble, SpatialProfile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    MeanField(#[from] MeanFieldError),
    #[error(transparent)]
    Flow(#[from] NbodyError),
}

/// Grid spacing of the expectation quadrature as a fraction of the support.
pub const EXPECTATION_CELLS_PER_SUPPORT: f64 = 8.0;

/// Sub-samples per axis when averaging `g_N` over a grid cell. `g_N` is an
/// indicator, so point sampling it would bias the quadrature at the sphere.
const G_SUBSAMPLES: usize = 5;

fn expectation_field(geometry: GridGeometry, mass: &[f64], spec: &KernelSpec, time: f64) -> GridField {
    let h = geometry.spacing;
    let conv = Convolver::new(geometry, mass, spec.max_range() + h);
    let force = conv.apply_vector(|d| geom::scale(-1.0, spec.eval_force(d)));
    let offsets: Vec<f64> = (0..G_SUBSAMPLES).map(|i| ((i as f64 + 0.5) / G_SUBSAMPLES as f64 - 0.5) * h).collect();
    let far = spec.g_radius() + h;
    let g = conv.apply(|d| {
        if geom::norm(d) > far {
            return 0.0;
        }
        let mut acc = 0.0;
        for &a in &offsets {
            for &b in &offsets {
                for &c in &offsets {
                    acc += spec.eval_g([d[0] + a, d[1] + b, d[2] + c]);
                }
            }
        }
        acc / (G_SUBSAMPLES * G_SUBSAMPLES * G_SUBSAMPLES) as f64
    });
    GridField { geometry, force, g: Some(g), time }
}

fn default_spacing(spec: &KernelSpec) -> f64 {
    spec.scaled_support() / EXPECTATION_CELLS_PER_SUPPORT
}

/// `-(f_N * rho)` and `g_N * rho` of an analytic spatial density (time 0).
pub fn expectation_from_density(spatial: &SpatialProfile, spec: &KernelSpec, spacing: Option<f64>) -> GridField {
    let h = spacing.unwrap_or_else(|| default_spacing(spec));
    expectation_on_grid(GridGeometry::cube(spatial.radius() + h, h), spatial, spec)
}

/// As [`expectation_from_density`] on a caller-chosen grid.
pub fn expectation_on_grid(geometry: GridGeometry, spatial: &SpatialProfile, spec: &KernelSpec) -> GridField {
    let mass = grid::sample_density(&geometry, |x| spatial.density(x));
    expectation_field(geometry, &mass, spec, 0.0)
}

/// The same fields for the empirical law of an evolved reference snapshot,
/// deposited with cloud-in-cell weights. The grid covers the cube of
/// half-width `cover` and the reference points plus the kernel range.
pub fn expectation_from_reference(
    reference: &ParticleEnsemble,
    spec: &KernelSpec,
    spacing: Option<f64>,
    cover: f64,
) -> Result<GridField, StatsError> {
    let h = spacing.unwrap_or_else(|| default_spacing(spec));
    let r = reference.positions.iter().map(|q| geom::norm_inf(*q)).fold(0.0, f64::max);
    let geometry = GridGeometry::cube((r + spec.max_range()).max(cover) + 2.0 * h, h);
    let w = 1.0 / reference.n() as f64;
    let mass = grid::deposit_cic(&geometry, &reference.positions, w)
        .map_err(|i| MeanFieldError::OutOfDomain { q: reference.positions[i] })?;
    Ok(expectation_field(geometry, &mass, spec, reference.time))
}

/// 8-point Gauss-Legendre nodes and weights on `[-1, 1]`.
#[allow(clippy::excessive_precision)]
const GL8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_2, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_2, 0.101_228_536_290_376_26),
];

/// Composite Gauss-Legendre on `[a, b]`, split at `breaks` (where the
/// integrand loses smoothness) and into `panels` pieces between them.
fn gauss(a: f64, b: f64, breaks: &[f64], panels: usize, f: impl Fn(f64) -> f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut pts = vec![a];
    pts.extend(breaks.iter().copied().filter(|x| *x > a && *x < b));
    pts.push(b);
    pts.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    for w in pts.windows(2) {
        let h = (w[1] - w[0]) / panels as f64;
        for k in 0..panels {
            let mid = w[0] + (k as f64 + 0.5) * h;
            for (x, wt) in GL8 {
                acc += wt * 0.5 * h * f(mid + 0.5 * h * x);
            }
        }
    }
    acc
}

/// Table nodes in `|q|` for [`RadialExpectation`].
const RADIAL_NODES: usize = 2048;
const RADIAL_PANELS: usize = 4;

/// Expectations against a radial spatial density, tabulated in `|q|` from
/// nested 1-D quadratures over the support ball of the kernel:
/// with `c` the cosine between `y` and `q`,
/// `(f_N * rho)(q) . q^ = int_0^s 2 pi v^2 f_r(v) int_{-1}^{1} c rho(|q - y|) dc dv`.
#[derive(Clone, Debug)]
pub struct RadialExpectation {
    step: f64,
    /// Radial component of `-(f_N * rho)`.
    force_r: Vec<f64>,
    g: Vec<f64>,
}

impl RadialExpectation {
    pub fn new(spatial: &SpatialProfile, spec: &KernelSpec) -> Self {
        let big_r = spatial.radius();
        let s = spec.scaled_support();
        let rg = spec.g_radius();
        let a_max = big_r + s.max(rg);
        let step = a_max / (RADIAL_NODES - 1) as f64;
        let rho = |u2: f64| spatial.radial_density(u2.max(0.0).sqrt());
        let f_r = |v: f64| spec.eval_force([v, 0.0, 0.0])[0];
        let inner = |a: f64, v: f64, moment: bool| {
            let cstar = if a > 0.0 && v > 0.0 { (a * a + v * v - big_r * big_r) / (2.0 * a * v) } else { 2.0 };
            gauss(-1.0, 1.0, &[cstar], RADIAL_PANELS, |c| {
                let r = rho(a * a + v * v - 2.0 * a * v * c);
                if moment {
                    c * r
                } else {
                    r
                }
            })
        };
        let two_pi = 2.0 * std::f64::consts::PI;
        let (force_r, g): (Vec<f64>, Vec<f64>) = (0..RADIAL_NODES)
            .into_par_iter()
            .map(|i| {
                let a = i as f64 * step;
                let breaks = [(a - big_r).abs(), big_r - a, a + big_r];
                let fr = if a == 0.0 {
                    0.0
                } else {
                    gauss(0.0, s, &breaks, RADIAL_PANELS, |v| two_pi * v * v * f_r(v) * inner(a, v, true))
                };
                let g = spec.g_amplitude()
                    * gauss(0.0, rg, &breaks, RADIAL_PANELS, |v| two_pi * v * v * inner(a, v, false));
                (-fr, g)
            })
            .unzip();
        Self { step, force_r, g }
    }

    fn lerp(&self, table: &[f64], a: f64) -> f64 {
        let u = a / self.step;
        let i = u.floor() as usize;
        if i + 1 >= table.len() {
            return 0.0;
        }
        let t = u - i as f64;
        (1.0 - t) * table[i] + t * table[i + 1]
    }

    pub fn force_at(&self, q: Vec3) -> Vec3 {
        let a = geom::norm(q);
        if a == 0.0 {
            return ZERO;
        }
        geom::scale(self.lerp(&self.force_r, a) / a, q)
    }

    pub fn g_at(&self, q: Vec3) -> f64 {
        self.lerp(&self.g, geom::norm(q))
    }
}

/// Expectation side of the fluctuation statistics.
#[derive(Clone, Debug)]
pub enum Expectation {
    /// Exact law at time 0.
    Radial(RadialExpectation),
    /// Gridded law of an evolved reference snapshot (must carry `g`).
    Grid(GridField),
}

impl Expectation {
    pub fn force_at(&self, q: Vec3) -> Result<Vec3, StatsError> {
        match self {
            Expectation::Radial(r) => Ok(r.force_at(q)),
            Expectation::Grid(g) => Ok(g.force_at(q)?),
        }
    }

    pub fn g_at(&self, q: Vec3) -> Result<f64, StatsError> {
        match self {
            Expectation::Radial(r) => Ok(r.g_at(q)),
            Expectation::Grid(g) => Ok(g.g_at(q)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluctuationRecord {
    #[serde(rename = "N")]
    pub n: usize,
    pub beta: f64,
    pub t: f64,
    pub seed: u64,
    pub force_gap_inf: f64,
    pub g_gap_inf: f64,
    /// Sample variance of the vector `Z_j` (sum of component variances).
    pub tagged_variance_f: f64,
    pub tagged_variance_g: f64,
    /// `|mean_j Z_j|`.
    pub tagged_mean_f: f64,
    pub tagged_mean_g: f64,
    /// `N^(5 beta - 1) ln N`.
    pub threshold_f: f64,
    /// `N^(7 beta - 1) ln N`.
    pub threshold_g: f64,
}

impl FluctuationRecord {
    /// `|mean Z| <= 3 sqrt(var / N)` for both summands.
    pub fn is_centred(&self) -> bool {
        let nf = self.n as f64;
        self.tagged_mean_f <= 3.0 * (self.tagged_variance_f / nf).sqrt()
            && self.tagged_mean_g <= 3.0 * (self.tagged_variance_g / nf).sqrt()
    }
}

/// Fluctuation statistics of `sample` against `field`. Particle 0 is the
/// tagged particle.
pub fn fluctuation_statistics(
    sample: &ParticleEnsemble,
    field: &Expectation,
    spec: &KernelSpec,
) -> Result<FluctuationRecord, StatsError> {
    let n = sample.n();
    if n < 3 {
        return Err(StatsError::InsufficientData(format!("need at least 3 particles, got {n}")));
    }
    let qs = &sample.positions;
    let opts = ForceOptions::default();
    let f = nbody::total_force_at(qs, spec, opts)?;
    let g = nbody::total_g(qs, spec, opts);
    let mut force_gap_inf = 0.0f64;
    let mut g_gap_inf = 0.0f64;
    for j in 0..n {
        let fbar = field.force_at(qs[j])?;
        force_gap_inf = force_gap_inf.max(geom::norm_inf(geom::sub(f[j], fbar)));
        g_gap_inf = g_gap_inf.max((g[j] - field.g_at(qs[j])?).abs());
    }

    // the field stores -(f_N * rho)
    let ef = geom::scale(-1.0, field.force_at(qs[0])?);
    let eg = field.g_at(qs[0])?;
    let m = (n - 1) as f64;
    let (mut sf, mut sg) = (ZERO, 0.0);
    for q in &qs[1..] {
        let d = geom::sub(qs[0], *q);
        sf = geom::add(sf, geom::sub(spec.eval_force(d), ef));
        sg += spec.eval_g(d) - eg;
    }
    let mean_f = geom::scale(1.0 / m, sf);
    let mean_g = sg / m;
    let (mut vf, mut vg) = (0.0, 0.0);
    for q in &qs[1..] {
        let d = geom::sub(qs[0], *q);
        let z = geom::sub(spec.eval_force(d), ef);
        vf += geom::norm2(geom::sub(z, mean_f));
        vg += (spec.eval_g(d) - eg - mean_g).powi(2);
    }
    let nf = n as f64;
    Ok(FluctuationRecord {
        n,
        beta: spec.beta(),
        t: sample.time,
        seed: sample.seed,
        force_gap_inf,
        g_gap_inf,
        tagged_variance_f: vf / (m - 1.0),
        tagged_variance_g: vg / (m - 1.0),
        tagged_mean_f: geom::norm(mean_f),
        tagged_mean_g: mean_g.abs(),
        threshold_f: nf.powf(5.0 * spec.beta() - 1.0) * nf.ln(),
        threshold_g: nf.powf(7.0 * spec.beta() - 1.0) * nf.ln(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = a + b x`. Needs two distinct `x`.
pub fn ols(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Some(LineFit { slope, intercept, r2 })
}

/// Median of a non-empty slice (mean of the two central values for even
/// length). Sorting makes it independent of input order.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceFit {
    pub exponent_f: f64,
    pub exponent_g: f64,
    pub r2_f: f64,
    pub r2_g: f64,
    #[serde(rename = "N")]
    pub n_values: Vec<usize>,
    pub median_variance_f: Vec<f64>,
    pub median_variance_g: Vec<f64>,
}

pub const MIN_FIT_N_VALUES: usize = 3;
pub const MIN_FIT_REPLICAS: usize = 20;

fn group_by_n(records: &[FluctuationRecord]) -> BTreeMap<usize, Vec<&FluctuationRecord>> {
    let mut groups: BTreeMap<usize, Vec<&FluctuationRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.n).or_default().push(r);
    }
    groups
}

/// Slopes of `ln median(variance)` against `ln N`.
pub fn variance_scaling_fit(records: &[FluctuationRecord]) -> Result<VarianceFit, StatsError> {
    let groups = group_by_n(records);
    if groups.len() < MIN_FIT_N_VALUES {
        return Err(StatsError::InsufficientData(format!(
            "{} distinct N values, need {MIN_FIT_N_VALUES}",
            groups.len()
        )));
    }
    if let Some((n, g)) = groups.iter().find(|(_, g)| g.len() < MIN_FIT_REPLICAS) {
        return Err(StatsError::InsufficientData(format!("{} replicas at N = {n}, need {MIN_FIT_REPLICAS}", g.len())));
    }
    let n_values: Vec<usize> = groups.keys().copied().collect();
    let med = |f: fn(&FluctuationRecord) -> f64| -> Vec<f64> {
        groups.values().map(|g| median(&g.iter().map(|r| f(r)).collect::<Vec<_>>())).collect()
    };
    let mf = med(|r| r.tagged_variance_f);
    let mg = med(|r| r.tagged_variance_g);
    let x: Vec<f64> = n_values.iter().map(|&n| (n as f64).ln()).collect();
    let fit = |m: &[f64]| {
        let y: Vec<f64> = m.iter().map(|v| v.ln()).collect();
        ols(&x, &y)
            .filter(|l| l.slope.is_finite())
            .ok_or_else(|| StatsError::InsufficientData("median variance is zero or not finite for some N".into()))
    };
    let ff = fit(&mf)?;
    let fg = fit(&mg)?;
    Ok(VarianceFit {
        exponent_f: ff.slope,
        exponent_g: fg.slope,
        r2_f: ff.r2,
        r2_g: fg.r2,
        n_values,
        median_variance_f: mf,
        median_variance_g: mg,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub replicas: usize,
    #[serde(rename = "frac_B")]
    pub frac_b: f64,
    #[serde(rename = "frac_C")]
    pub frac_c: f64,
}

/// Fraction of replicas per `N` with gaps at or above `c_gamma` times the
/// recorded thresholds.
pub fn threshold_exceedance(records: &[FluctuationRecord], c_gamma: f64) -> Vec<ExceedanceRow> {
    group_by_n(records)
        .into_iter()
        .map(|(n, g)| {
            let k = g.len() as f64;
            let hit = |gap: fn(&FluctuationRecord) -> f64, th: fn(&FluctuationRecord) -> f64| {
                g.iter().filter(|r| gap(r) >= c_gamma * th(r)).count() as f64 / k
            };
            ExceedanceRow {
                n,
                replicas: g.len(),
                frac_b: hit(|r| r.force_gap_inf, |r| r.threshold_f),
                frac_c: hit(|r| r.g_gap_inf, |r| r.threshold_g),
            }
        })
        .collect()
}

/// `true` when each entry is at most the previous one.
pub fn is_nonincreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

/// A law of i.i.d. centred summands `Z` with `|Z| <= c` and
/// `E Z^2 <= c / N`. Returns one draw of `S_N = sum_{i <= N} Z_i`.
pub trait Summand: Sync {
    fn sample_sum(&self, n: usize, rng: &mut dyn RngCore) -> f64;
}

pub struct ZeroSummand;

impl Summand for ZeroSummand {
    fn sample_sum(&self, _n: usize, _rng: &mut dyn RngCore) -> f64 {
        0.0
    }
}

/// `Z = +-1/sqrt(N)` with probability 1/2 each.
pub struct TwoPointSummand;

impl Summand for TwoPointSummand {
    fn sample_sum(&self, n: usize, rng: &mut dyn RngCore) -> f64 {
        let mut ones = 0u64;
        let mut left = n;
        while left > 0 {
            let take = left.min(64);
            let mask = if take == 64 { u64::MAX } else { (1u64 << take) - 1 };
            ones += (rng.next_u64() & mask).count_ones() as u64;
            left -= take;
        }
        (2.0 * ones as f64 - n as f64) / (n as f64).sqrt()
    }
}

/// `Z` uniform on `[-a/sqrt(N), a/sqrt(N)]`.
pub struct UniformSummand {
    pub half_width: f64,
}

impl Summand for UniformSummand {
    fn sample_sum(&self, n: usize, rng: &mut dyn RngCore) -> f64 {
        let a = self.half_width / (n as f64).sqrt();
        let mut s = 0.0;
        for _ in 0..n {
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            s += a * (2.0 * u - 1.0);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpMomentRecord {
    #[serde(rename = "N")]
    pub n: usize,
    pub trials: usize,
    /// Sample mean of `exp(|S_N|)`.
    pub mean: f64,
    pub std_error: f64,
    /// `mean + 3 std_error`.
    pub bound_estimate: f64,
}

/// Monte Carlo estimate of `E exp(|S_N|)`.
pub fn exponential_moment_check(summand: &dyn Summand, n: usize, trials: usize, seed: u64) -> ExpMomentRecord {
    let mut rng = rng_from_seed(seed);
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..trials {
        let e = summand.sample_sum(n, &mut rng).abs().exp();
        s1 += e;
        s2 += e * e;
    }
    let k = trials as f64;
    let mean = s1 / k;
    let var = if trials > 1 { ((s2 - k * mean * mean) / (k - 1.0)).max(0.0) } else { 0.0 };
    let std_error = (var / k).sqrt();
    ExpMomentRecord { n, trials, mean, std_error, bound_estimate: mean + 3.0 * std_error }
}

/// `(max - min) / min` of the estimated means.
pub fn relative_spread(records: &[ExpMomentRecord]) -> f64 {
    let lo = records.iter().map(|r| r.mean).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.mean).fold(0.0, f64::max);
    (hi - lo) / lo
}
