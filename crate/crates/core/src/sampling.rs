//! Initial one-particle density `k0(q, p) = rho(q) M(p)` and reproducible
//! i.i.d. sampling of particle ensembles.
//!
//! Ensembles are drawn sequentially in particle index from a
//! [`ChaCha8Rng`] seeded with `seed_from_u64`, so `(density, n, seed)`
//! determines the output bit for bit on every machine and thread count.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Vec3};
use crate::kernel::grid_sup;

/// Identifier of the generator, written into every manifest.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng (rand_chacha 0.9, seed_from_u64)";

pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;

pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mix a base seed with stream coordinates (splitmix64 finaliser), giving
/// well-separated seeds for `(N, replica)` cells.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    stream.iter().fold(mix(base), |acc, &s| mix(acc ^ mix(s)))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("density is not twice differentiable with bounded derivatives: {0}")]
    NonSmoothDensity(String),
    #[error("ensemble size must be at least 1")]
    EmptyEnsemble,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpatialProfile {
    /// `rho(q) = c (1 - |q|^2/R^2)^4`, radial and non-increasing.
    PolyBumpSpace { radius: f64 },
    /// Indicator of the ball of radius `R`, normalised.
    UniformBall { radius: f64 },
}

/// `int_0^1 s^2 (1 - s^2)^4 ds`
const POLY_SHELL_INTEGRAL: f64 = 128.0 / 3465.0;

impl SpatialProfile {
    pub fn radius(&self) -> f64 {
        match *self {
            SpatialProfile::PolyBumpSpace { radius } | SpatialProfile::UniformBall { radius } => radius,
        }
    }

    fn validate(&self) -> Result<(), SamplingError> {
        let r = self.radius();
        if !(r.is_finite() && r > 0.0) {
            return Err(SamplingError::InvalidDensity(format!("spatial radius must be positive, got {r}")));
        }
        Ok(())
    }

    fn norm_const(&self) -> f64 {
        let r = self.radius();
        match self {
            SpatialProfile::PolyBumpSpace { .. } => 1.0 / (4.0 * PI * r * r * r * POLY_SHELL_INTEGRAL),
            SpatialProfile::UniformBall { .. } => 3.0 / (4.0 * PI * r * r * r),
        }
    }

    /// `rho` as a function of `|q|`.
    pub fn radial_density(&self, r: f64) -> f64 {
        let rad = self.radius();
        if r >= rad {
            return if matches!(self, SpatialProfile::UniformBall { .. }) && r == rad {
                self.norm_const()
            } else {
                0.0
            };
        }
        match self {
            SpatialProfile::PolyBumpSpace { .. } => {
                let w = 1.0 - r * r / (rad * rad);
                self.norm_const() * w * w * w * w
            }
            SpatialProfile::UniformBall { .. } => self.norm_const(),
        }
    }

    pub fn density(&self, q: Vec3) -> f64 {
        self.radial_density(geom::norm(q))
    }

    /// `rho'(r)` (zero for the uniform ball away from its boundary).
    pub fn radial_derivative(&self, r: f64) -> f64 {
        match self {
            SpatialProfile::PolyBumpSpace { radius } => {
                if r >= *radius {
                    return 0.0;
                }
                let rr = radius * radius;
                let w = 1.0 - r * r / rr;
                -8.0 * self.norm_const() * r / rr * w * w * w
            }
            SpatialProfile::UniformBall { .. } => 0.0,
        }
    }

    /// `(Laplacian rho)(r) = rho'' + 2 rho'/r`.
    pub fn radial_laplacian(&self, r: f64) -> f64 {
        match self {
            SpatialProfile::PolyBumpSpace { radius } => {
                if r >= *radius {
                    return 0.0;
                }
                let rr = radius * radius;
                let u = r * r / rr;
                let w = 1.0 - u;
                self.norm_const() / rr * w * w * (72.0 * u - 24.0)
            }
            SpatialProfile::UniformBall { .. } => 0.0,
        }
    }

    /// Mass inside the ball of radius `r`.
    pub fn radial_cdf(&self, r: f64) -> f64 {
        let s = (r / self.radius()).clamp(0.0, 1.0);
        match self {
            SpatialProfile::PolyBumpSpace { .. } => {
                let s2 = s * s;
                // int_0^s t^2 (1 - t^2)^4 dt, Horner in s^2
                let poly = s * s2 * (1.0 / 3.0 + s2 * (-4.0 / 5.0 + s2 * (6.0 / 7.0 + s2 * (-4.0 / 9.0 + s2 / 11.0))));
                (poly / POLY_SHELL_INTEGRAL).min(1.0)
            }
            SpatialProfile::UniformBall { .. } => s * s * s,
        }
    }

    /// Radius with `radial_cdf(r) = u`.
    pub fn inverse_radial_cdf(&self, u: f64) -> f64 {
        let rad = self.radius();
        match self {
            SpatialProfile::UniformBall { .. } => rad * u.cbrt(),
            SpatialProfile::PolyBumpSpace { .. } => {
                let (mut lo, mut hi) = (0.0, rad);
                for _ in 0..64 {
                    let mid = 0.5 * (lo + hi);
                    if self.radial_cdf(mid) < u {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MomentumProfile {
    /// Isotropic Gaussian with standard deviation `sigma` per axis,
    /// conditioned on `|p| <= truncation`.
    Gaussian { sigma: f64, truncation: f64 },
}

impl MomentumProfile {
    pub fn max_speed(&self) -> f64 {
        match *self {
            MomentumProfile::Gaussian { truncation, .. } => truncation,
        }
    }

    fn validate(&self) -> Result<(), SamplingError> {
        match *self {
            MomentumProfile::Gaussian { sigma, truncation } => {
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(SamplingError::InvalidDensity(format!("momentum sigma must be positive, got {sigma}")));
                }
                if !(truncation.is_finite() && truncation > 0.0) {
                    return Err(SamplingError::InvalidDensity(format!(
                        "momentum truncation must be positive, got {truncation}"
                    )));
                }
                Ok(())
            }
        }
    }

    fn sample(&self, rng: &mut SimRng) -> Vec3 {
        match *self {
            MomentumProfile::Gaussian { sigma, truncation } => loop {
                let (a, b) = box_muller(rng);
                let (c, _) = box_muller(rng);
                let p = [sigma * a, sigma * b, sigma * c];
                if geom::norm(p) <= truncation {
                    return p;
                }
            },
        }
    }
}

fn box_muller(rng: &mut SimRng) -> (f64, f64) {
    // 1 - U lies in (0, 1], so the logarithm is finite
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let t = 2.0 * PI * u2;
    (r * t.cos(), r * t.sin())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialDensity {
    pub spatial: SpatialProfile,
    pub momentum: MomentumProfile,
}

impl Default for InitialDensity {
    fn default() -> Self {
        Self {
            spatial: SpatialProfile::PolyBumpSpace { radius: 2.0 },
            momentum: MomentumProfile::Gaussian { sigma: 1.0, truncation: 6.0 },
        }
    }
}

impl InitialDensity {
    pub fn validate(&self) -> Result<(), SamplingError> {
        self.spatial.validate()?;
        self.momentum.validate()
    }

    /// Draw one phase-space point.
    pub fn sample_one(&self, rng: &mut SimRng) -> (Vec3, Vec3) {
        let r = self.spatial.inverse_radial_cdf(rng.random::<f64>());
        let cos_t = 2.0 * rng.random::<f64>() - 1.0;
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let ph = 2.0 * PI * rng.random::<f64>();
        let q = [r * sin_t * ph.cos(), r * sin_t * ph.sin(), r * cos_t];
        (q, self.momentum.sample(rng))
    }
}

/// Positions and momenta of `n` particles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub positions: Vec<Vec3>,
    pub momenta: Vec<Vec3>,
    pub seed: u64,
    pub time: f64,
}

impl ParticleEnsemble {
    pub fn new(positions: Vec<Vec3>, momenta: Vec<Vec3>, seed: u64, time: f64) -> Result<Self, SamplingError> {
        let e = Self { positions, momenta, seed, time };
        e.validate()?;
        Ok(e)
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.positions.is_empty() {
            return Err(SamplingError::EmptyEnsemble);
        }
        if self.positions.len() != self.momenta.len() {
            return Err(SamplingError::InvalidDensity(format!(
                "{} positions but {} momenta",
                self.positions.len(),
                self.momenta.len()
            )));
        }
        if !self.is_finite() {
            return Err(SamplingError::InvalidDensity("non-finite coordinate".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().chain(&self.momenta).all(|v| geom::is_finite(*v))
    }

    /// Copy with all momenta negated (time reversal).
    pub fn reversed(&self) -> Self {
        let mut e = self.clone();
        for p in &mut e.momenta {
            *p = geom::scale(-1.0, *p);
        }
        e
    }

    pub fn total_momentum(&self) -> Vec3 {
        self.momenta.iter().fold(geom::ZERO, |acc, p| geom::add(acc, *p))
    }

    /// Sub-ensemble with the given particle indices.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            momenta: indices.iter().map(|&i| self.momenta[i]).collect(),
            seed: self.seed,
            time: self.time,
        }
    }

    /// CSV with a `#` header line carrying `{format-version, n, seed, time}`.
    /// Floats use the shortest round-trip representation, so a dump/load
    /// cycle reproduces the ensemble exactly.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "# chaoslab-ensemble format-version={} n={} seed={} time={}",
            ENSEMBLE_FORMAT_VERSION,
            self.n(),
            self.seed,
            self.time
        )?;
        writeln!(w, "index,qx,qy,qz,px,py,pz")?;
        for (i, (q, p)) in self.positions.iter().zip(&self.momenta).enumerate() {
            writeln!(w, "{i},{},{},{},{},{},{}", q[0], q[1], q[2], p[0], p[1], p[2])?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, EnsembleIoError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(EnsembleIoError::Format("empty file".into()))??;
        let header = header
            .strip_prefix("# chaoslab-ensemble")
            .ok_or_else(|| EnsembleIoError::Format("missing ensemble header".into()))?;
        let mut version = None;
        let mut n = None;
        let mut seed = None;
        let mut time = 0.0;
        for kv in header.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| EnsembleIoError::Format(format!("bad header field {kv}")))?;
            let bad = |_| EnsembleIoError::Format(format!("bad value for {k}: {v}"));
            match k {
                "format-version" => version = Some(v.parse::<u32>().map_err(|e| bad(e.to_string()))?),
                "n" => n = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|e| bad(e.to_string()))?),
                "time" => time = v.parse::<f64>().map_err(|e| bad(e.to_string()))?,
                _ => {}
            }
        }
        if version != Some(ENSEMBLE_FORMAT_VERSION) {
            return Err(EnsembleIoError::Format(format!("unsupported format-version {version:?}")));
        }
        let n = n.ok_or_else(|| EnsembleIoError::Format("header lacks n".into()))?;
        let seed = seed.ok_or_else(|| EnsembleIoError::Format("header lacks seed".into()))?;
        lines.next().ok_or_else(|| EnsembleIoError::Format("missing column header".into()))??;
        let mut positions = Vec::with_capacity(n);
        let mut momenta = Vec::with_capacity(n);
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| EnsembleIoError::Format(format!("row {row}: {e}")))?;
            if vals.len() != 6 {
                return Err(EnsembleIoError::Format(format!("row {row}: expected 7 columns")));
            }
            positions.push([vals[0], vals[1], vals[2]]);
            momenta.push([vals[3], vals[4], vals[5]]);
        }
        if positions.len() != n {
            return Err(EnsembleIoError::Format(format!("header says n={n}, found {} rows", positions.len())));
        }
        Ok(ParticleEnsemble::new(positions, momenta, seed, time)?)
    }
}

#[derive(Debug, Error)]
pub enum EnsembleIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("ensemble file: {0}")]
    Format(String),
    #[error(transparent)]
    Invalid(#[from] SamplingError),
}

/// Draw `n` i.i.d. samples from `density`.
pub fn sample_ensemble(density: &InitialDensity, n: usize, seed: u64) -> Result<ParticleEnsemble, SamplingError> {
    density.validate()?;
    if n == 0 {
        return Err(SamplingError::EmptyEnsemble);
    }
    let mut rng = rng_from_seed(seed);
    let mut positions = Vec::with_capacity(n);
    let mut momenta = Vec::with_capacity(n);
    for _ in 0..n {
        let (q, p) = density.sample_one(&mut rng);
        positions.push(q);
        momenta.push(p);
    }
    Ok(ParticleEnsemble { positions, momenta, seed, time: 0.0 })
}

/// Draw `k` distinct indices out of `0..n` (partial Fisher-Yates), sorted.
pub fn sample_indices(n: usize, k: usize, rng: &mut impl RngCore) -> Vec<usize> {
    let k = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

/// Bounds on the spatial marginal used as constants in the mean-field force
/// bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityBounds {
    pub sup_density: f64,
    pub sup_gradient: f64,
    pub sup_laplacian: f64,
}

pub fn density_marginal_bounds(density: &InitialDensity) -> Result<DensityBounds, SamplingError> {
    density.validate()?;
    match density.spatial {
        SpatialProfile::UniformBall { .. } => {
            Err(SamplingError::NonSmoothDensity("the uniform ball has a jump at its boundary".into()))
        }
        sp @ SpatialProfile::PolyBumpSpace { radius } => {
            let sup_gradient = grid_sup::<SamplingError>(radius, |r| Ok(sp.radial_derivative(r).abs()))?;
            let sup_laplacian = grid_sup::<SamplingError>(radius, |r| Ok(sp.radial_laplacian(r).abs()))?;
            Ok(DensityBounds { sup_density: sp.radial_density(0.0), sup_gradient, sup_laplacian })
        }
    }
}
