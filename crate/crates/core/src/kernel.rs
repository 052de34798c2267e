//! Base potential, its N-scaled version, the pair force and the fluctuation
//! dominator `g`.
//!
//! With length scale `s = N^beta` the scaled objects are
//!
//! ```text
//! phi_N(x) = N^(3 beta - 1) phi(s x)
//! f_N(q)   = N^(4 beta) l(s q),        l = grad phi
//! g_N(q)   = L N^(5 beta) 1{ s q in enlarged supp l }
//! ```
//!
//! so that `f_N = N grad phi_N`; the `1/N` weight of the pair force is applied
//! by the callers that sum over particles.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use rand::Rng;

use crate::geom::{self, Vec3, ZERO};
use crate::sampling::rng_from_seed;

/// Exclusive upper bound on the scaling exponent.
pub const BETA_MAX: f64 = 1.0 / 7.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("beta = {0} outside [0, 1/7)")]
    InvalidBeta(f64),
    #[error("particle count must be at least 1")]
    InvalidParticleCount,
    #[error("alpha_enlarge = {0} must be positive and finite")]
    InvalidAlpha(f64),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("non-finite derivative of the profile at r = {r}")]
    NonFiniteDerivative { r: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileShape {
    /// `a (1 - |x|^2/R^2)^4` on the ball of radius `R`.
    #[default]
    PolyBump,
    /// `a exp(1 - 1/(1 - |x|^2/R^2))` on the ball of radius `R` (C-infinity).
    SmoothBump,
}

/// Values of the radial profile `h` at one radius. `h'(r)/r` is returned
/// instead of `h'` so that the gradient `l(x) = (h'(r)/r) x` never divides
/// by `r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialValues {
    pub h: f64,
    pub dh_over_r: f64,
    pub d2h: f64,
}

impl RadialValues {
    const ZERO: RadialValues = RadialValues { h: 0.0, dh_over_r: 0.0, d2h: 0.0 };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseProfile {
    pub shape: ProfileShape,
    pub support_radius: f64,
    pub amplitude: f64,
}

impl Default for BaseProfile {
    fn default() -> Self {
        Self { shape: ProfileShape::PolyBump, support_radius: 1.0, amplitude: 1.0 }
    }
}

impl BaseProfile {
    pub fn new(shape: ProfileShape, support_radius: f64, amplitude: f64) -> Result<Self, KernelError> {
        let p = Self { shape, support_radius, amplitude };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if !(self.support_radius.is_finite() && self.support_radius > 0.0) {
            return Err(KernelError::InvalidProfile(format!(
                "support_radius must be positive, got {}",
                self.support_radius
            )));
        }
        if !self.amplitude.is_finite() {
            return Err(KernelError::InvalidProfile("amplitude must be finite".into()));
        }
        Ok(())
    }

    pub fn radial(&self, r: f64) -> RadialValues {
        let rr = self.support_radius * self.support_radius;
        let u = r * r / rr;
        if u >= 1.0 {
            return RadialValues::ZERO;
        }
        let a = self.amplitude;
        let w = 1.0 - u;
        match self.shape {
            ProfileShape::PolyBump => {
                let w2 = w * w;
                let w3 = w2 * w;
                RadialValues {
                    h: a * w2 * w2,
                    dh_over_r: -8.0 * a / rr * w3,
                    d2h: -8.0 * a / rr * w3 + 48.0 * a * r * r / (rr * rr) * w2,
                }
            }
            ProfileShape::SmoothBump => {
                let h = a * (1.0 - 1.0 / w).exp();
                if h == 0.0 {
                    return RadialValues::ZERO;
                }
                let c = -2.0 / (rr * w * w);
                RadialValues { h, dh_over_r: c * h, d2h: h * (c + r * r * (c * c - 8.0 / (rr * rr * w * w * w))) }
            }
        }
    }

    /// `phi(x)`.
    pub fn phi(&self, x: Vec3) -> f64 {
        self.radial(geom::norm(x)).h
    }

    /// `l(x) = grad phi(x)`.
    pub fn gradient(&self, x: Vec3) -> Vec3 {
        let rv = self.radial(geom::norm(x));
        geom::scale(rv.dh_over_r, x)
    }
}

/// Analytic constants of a profile, obtained by refined 1-D grids and
/// quadrature over the support.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileConstants {
    /// `S_i = sup |D_i l|` (Euclidean norm of the i-th partial vector).
    pub sup_partial: [f64; 3],
    /// `L = sqrt(S_1^2 + S_2^2 + S_3^2)`.
    pub lipschitz: f64,
    /// `sup |l|`.
    pub sup_l: f64,
    /// `int |l|`.
    pub l_l1: f64,
    /// `int |l|^2`.
    pub l_l2_sq: f64,
    /// `int |phi|`.
    pub phi_l1: f64,
}

const REL_TOL: f64 = 1e-6;

fn converged(prev: f64, next: f64, tol: f64) -> bool {
    (next - prev).abs() <= tol * next.abs().max(prev.abs()) || (prev == 0.0 && next == 0.0)
}

/// Dense-grid supremum of `f` on `[0, r_max]`, doubling the grid until two
/// successive refinements agree to `REL_TOL`.
pub(crate) fn grid_sup<E>(r_max: f64, f: impl Fn(f64) -> Result<f64, E>) -> Result<f64, E> {
    let eval = |n: usize| -> Result<f64, E> {
        let mut best = 0.0f64;
        for i in 0..=n {
            let r = r_max * i as f64 / n as f64;
            best = best.max(f(r)?);
        }
        Ok(best)
    };
    let mut n = 1024;
    let mut prev = eval(n)?;
    loop {
        n *= 2;
        let next = eval(n)?;
        if converged(prev, next, REL_TOL) || n >= 1 << 22 {
            return Ok(next);
        }
        prev = next;
    }
}

/// Composite Simpson rule on `[0, r_max]` with interval doubling until the
/// relative change drops below `tol`.
pub(crate) fn simpson(r_max: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let rule = |n: usize| {
        let h = r_max / n as f64;
        let mut s = f(0.0) + f(r_max);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(i as f64 * h);
        }
        s * h / 3.0
    };
    let mut n = 64;
    let mut prev = rule(n);
    loop {
        n *= 2;
        let next = rule(n);
        if converged(prev, next, tol) || n >= 1 << 22 {
            return next;
        }
        prev = next;
    }
}

pub fn compute_profile_constants(profile: &BaseProfile) -> Result<ProfileConstants, KernelError> {
    profile.validate()?;
    let r_max = profile.support_radius;
    let checked = |r: f64| -> Result<RadialValues, KernelError> {
        let v = profile.radial(r);
        if v.h.is_finite() && v.dh_over_r.is_finite() && v.d2h.is_finite() {
            Ok(v)
        } else {
            Err(KernelError::NonFiniteDerivative { r })
        }
    };
    // For a radial profile D_i l = h'' c xhat + (h'/r)(e_i - c xhat), c = x_i/r,
    // whose norm squared is a convex combination of h''^2 and (h'/r)^2.
    let s = grid_sup(r_max, |r| {
        let v = checked(r)?;
        Ok(v.d2h.abs().max(v.dh_over_r.abs()))
    })?;
    let sup_l = grid_sup(r_max, |r| Ok((checked(r)?.dh_over_r * r).abs()))?;

    let shell = 4.0 * PI;
    let quad_tol = 1e-9;
    let l_l1 = shell * simpson(r_max, quad_tol, |r| (profile.radial(r).dh_over_r * r).abs() * r * r);
    let l_l2_sq = shell
        * simpson(r_max, quad_tol, |r| {
            let d = profile.radial(r).dh_over_r * r;
            d * d * r * r
        });
    let phi_l1 = shell * simpson(r_max, quad_tol, |r| profile.radial(r).h.abs() * r * r);

    Ok(ProfileConstants { sup_partial: [s; 3], lipschitz: (3.0 * s * s).sqrt(), sup_l, l_l1, l_l2_sq, phi_l1 })
}

/// Test hook used by the validation suite's mutation check.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelMutation {
    /// Flip the sign of the force for displacements with negative x.
    SignFlipNegativeX,
}

/// The scaled kernel for one `(beta, N)` pair with cached constants.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec {
    profile: BaseProfile,
    beta: f64,
    n_particles: usize,
    alpha_enlarge: Option<f64>,
    constants: ProfileConstants,
    length_scale: f64,
    phi_amp: f64,
    force_amp: f64,
    g_amp: f64,
    scaled_support: f64,
    g_radius: f64,
    // fast path for the poly-bump force: f(q) = poly_coef (1 - u)^3 q, u = |q|^2 inv_support_sq
    poly_coef: f64,
    inv_support_sq: f64,
    mutation: Option<KernelMutation>,
}

impl KernelSpec {
    pub fn new(
        profile: BaseProfile,
        beta: f64,
        n_particles: usize,
        alpha_enlarge: Option<f64>,
    ) -> Result<Self, KernelError> {
        let constants = compute_profile_constants(&profile)?;
        Self::with_constants(profile, constants, beta, n_particles, alpha_enlarge)
    }

    pub fn with_constants(
        profile: BaseProfile,
        constants: ProfileConstants,
        beta: f64,
        n_particles: usize,
        alpha_enlarge: Option<f64>,
    ) -> Result<Self, KernelError> {
        profile.validate()?;
        if !(beta.is_finite() && (0.0..BETA_MAX).contains(&beta)) {
            return Err(KernelError::InvalidBeta(beta));
        }
        if n_particles == 0 {
            return Err(KernelError::InvalidParticleCount);
        }
        if let Some(a) = alpha_enlarge {
            if !(a.is_finite() && a > 0.0) {
                return Err(KernelError::InvalidAlpha(a));
            }
        }
        let n = n_particles as f64;
        let length_scale = n.powf(beta);
        let scaled_support = profile.support_radius / length_scale;
        let g_radius = match alpha_enlarge {
            Some(a) => scaled_support + 2.0 * 3f64.sqrt() * n.powf(-a),
            None => scaled_support,
        };
        let force_amp = n.powf(4.0 * beta);
        let rr = profile.support_radius * profile.support_radius;
        Ok(Self {
            profile,
            beta,
            n_particles,
            alpha_enlarge,
            constants,
            length_scale,
            phi_amp: n.powf(3.0 * beta - 1.0),
            force_amp,
            g_amp: constants.lipschitz * n.powf(5.0 * beta),
            scaled_support,
            g_radius,
            poly_coef: -8.0 * profile.amplitude / rr * force_amp * length_scale,
            inv_support_sq: length_scale * length_scale / rr,
            mutation: None,
        })
    }

    /// Same profile and exponents for a different particle count.
    pub fn for_n(&self, n_particles: usize) -> Result<Self, KernelError> {
        let mut k = Self::with_constants(self.profile, self.constants, self.beta, n_particles, self.alpha_enlarge)?;
        k.mutation = self.mutation;
        Ok(k)
    }

    #[doc(hidden)]
    pub fn with_mutation(mut self, m: KernelMutation) -> Self {
        self.mutation = Some(m);
        self
    }

    pub fn profile(&self) -> &BaseProfile {
        &self.profile
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn n_particles(&self) -> usize {
        self.n_particles
    }
    pub fn alpha_enlarge(&self) -> Option<f64> {
        self.alpha_enlarge
    }
    pub fn constants(&self) -> &ProfileConstants {
        &self.constants
    }
    pub fn lipschitz(&self) -> f64 {
        self.constants.lipschitz
    }
    /// `N^beta`.
    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }
    /// Radius of the support of `phi_N` and `f_N`: `R_phi N^-beta`.
    pub fn scaled_support(&self) -> f64 {
        self.scaled_support
    }
    /// Radius of the support of `g_N` (enlarged when `alpha_enlarge` is set).
    pub fn g_radius(&self) -> f64 {
        self.g_radius
    }
    /// Value of `g_N` on its support: `L N^(5 beta)`.
    pub fn g_amplitude(&self) -> f64 {
        self.g_amp
    }
    /// `sup |f_N| = sup|l| N^(4 beta)`.
    pub fn force_sup(&self) -> f64 {
        self.constants.sup_l * self.force_amp
    }
    /// Largest interaction range of `f_N` and `g_N`.
    pub fn max_range(&self) -> f64 {
        self.scaled_support.max(self.g_radius)
    }

    pub fn eval_phi_scaled(&self, x: Vec3) -> f64 {
        self.phi_amp * self.profile.phi(geom::scale(self.length_scale, x))
    }

    #[inline]
    pub fn eval_force(&self, q: Vec3) -> Vec3 {
        if q == ZERO {
            return ZERO;
        }
        let f = match self.profile.shape {
            ProfileShape::PolyBump => {
                let u = geom::norm2(q) * self.inv_support_sq;
                if u >= 1.0 {
                    return ZERO;
                }
                let w = 1.0 - u;
                geom::scale(self.poly_coef * w * w * w, q)
            }
            ProfileShape::SmoothBump => {
                let y = geom::scale(self.length_scale, q);
                geom::scale(self.force_amp, self.profile.gradient(y))
            }
        };
        match self.mutation {
            Some(KernelMutation::SignFlipNegativeX) if q[0] < 0.0 => geom::scale(-1.0, f),
            _ => f,
        }
    }

    #[inline]
    pub fn eval_g(&self, q: Vec3) -> f64 {
        if geom::norm2(q) <= self.g_radius * self.g_radius {
            self.g_amp
        } else {
            0.0
        }
    }
}

/// Outcome of a sampled inequality check `lhs <= rhs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledCheck {
    pub samples: usize,
    pub violations: usize,
    /// Largest `lhs / rhs` seen (0 when every `lhs` is 0).
    pub worst_ratio: f64,
}

impl SampledCheck {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Uniform point in the ball of radius `r`.
fn in_ball(rng: &mut impl Rng, r: f64) -> Vec3 {
    loop {
        let x: Vec3 = std::array::from_fn(|_| 2.0 * rng.random::<f64>() - 1.0);
        if geom::norm2(x) <= 1.0 {
            return geom::scale(r, x);
        }
    }
}

fn tally(samples: usize, mut draw: impl FnMut() -> (f64, f64)) -> SampledCheck {
    let mut out = SampledCheck { samples, violations: 0, worst_ratio: 0.0 };
    for _ in 0..samples {
        let (lhs, rhs) = draw();
        // relative slack for rounding in the force evaluation
        if lhs > rhs * (1.0 + 1e-12) {
            out.violations += 1;
        }
        if lhs > 0.0 {
            out.worst_ratio = out.worst_ratio.max(lhs / rhs);
        }
    }
    out
}

/// `|f_N(x) - f_N(y)| <= L N^(5 beta) |x - y|` on random pairs around the
/// support, half of them at separations below a tenth of the support.
pub fn check_lipschitz(spec: &KernelSpec, samples: usize, seed: u64) -> SampledCheck {
    let mut rng = rng_from_seed(seed);
    let s = spec.scaled_support();
    let lip = spec.lipschitz() * (spec.n_particles as f64).powf(5.0 * spec.beta);
    let mut k = 0usize;
    tally(samples, || {
        k += 1;
        let x = in_ball(&mut rng, 1.2 * s);
        let y = if k.is_multiple_of(2) { in_ball(&mut rng, 1.2 * s) } else { geom::add(x, in_ball(&mut rng, 0.1 * s)) };
        let d = geom::norm(geom::sub(spec.eval_force(x), spec.eval_force(y)));
        (d, lip * geom::norm(geom::sub(x, y)))
    })
}

/// `|f_N(q) - f_N(q + delta)| <= g_N(q) |delta|` for `|delta|_inf <= 2 N^-alpha`,
/// with `g_N` enlarged by `alpha`.
pub fn check_domination(spec: &KernelSpec, alpha: f64, samples: usize, seed: u64) -> Result<SampledCheck, KernelError> {
    let g_spec = KernelSpec::with_constants(spec.profile, spec.constants, spec.beta, spec.n_particles, Some(alpha))?;
    let mut rng = rng_from_seed(seed);
    let h = 2.0 * (spec.n_particles as f64).powf(-alpha);
    let r = 1.1 * g_spec.g_radius();
    Ok(tally(samples, || {
        let q = in_ball(&mut rng, r);
        let delta: Vec3 = std::array::from_fn(|_| h * (2.0 * rng.random::<f64>() - 1.0));
        let d = geom::norm(geom::sub(spec.eval_force(q), spec.eval_force(geom::add(q, delta))));
        (d, g_spec.eval_g(q) * geom::norm(delta))
    }))
}

/// `f_N(-q) = -f_N(q)` exactly on random `q`; returns the violation count.
pub fn check_antisymmetry(spec: &KernelSpec, samples: usize, seed: u64) -> SampledCheck {
    let mut rng = rng_from_seed(seed);
    let s = spec.scaled_support();
    tally(samples, || {
        let q = in_ball(&mut rng, 1.2 * s);
        let sum = geom::norm(geom::add(spec.eval_force(q), spec.eval_force(geom::scale(-1.0, q))));
        (sum, 0.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(beta: f64, n: usize) -> KernelSpec {
        KernelSpec::new(BaseProfile::default(), beta, n, None).unwrap()
    }

    #[test]
    fn beta_zero_phi_is_phi_over_n() {
        for n in [1, 7, 1000] {
            let k = spec(0.0, n);
            assert!((k.eval_phi_scaled(ZERO) - 1.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn phi_vanishes_outside_support() {
        let k = spec(0.1, 300);
        let x = [2.0 * k.scaled_support(), 0.0, 0.0];
        assert_eq!(k.eval_phi_scaled(x), 0.0);
    }

    #[test]
    fn phi_at_origin_n1024() {
        // 1024^-0.7 = 2^-7 = 0.0078125
        let k = spec(0.1, 1024);
        assert!((k.eval_phi_scaled(ZERO) - 0.0078125).abs() < 1e-15);
    }

    #[test]
    fn force_zero_at_origin_and_outside() {
        let k = spec(0.1, 256);
        assert_eq!(k.eval_force(ZERO), ZERO);
        let q = [0.0, k.scaled_support(), 0.0];
        assert_eq!(k.eval_force(q), ZERO);
        assert_eq!(k.eval_force([3.0, 3.0, 3.0]), ZERO);
    }

    #[test]
    fn force_is_n_times_gradient_of_scaled_phi() {
        let k = spec(0.1, 256);
        let n = 256.0;
        let h = 1e-6;
        for q in [[0.1, 0.0, 0.0], [0.05, -0.2, 0.1], [-0.3, 0.02, 0.15]] {
            let f = k.eval_force(q);
            for c in 0..3 {
                let mut qp = q;
                let mut qm = q;
                qp[c] += h;
                qm[c] -= h;
                let fd = n * (k.eval_phi_scaled(qp) - k.eval_phi_scaled(qm)) / (2.0 * h);
                let scale = geom::norm(f).max(1e-12);
                assert!((fd - f[c]).abs() <= 1e-6 * scale, "c={c} fd={fd} f={}", f[c]);
            }
        }
    }

    #[test]
    fn force_matches_closed_form() {
        for (beta, n) in [(0.0, 10), (0.1, 256), (0.13, 5000)] {
            let k = spec(beta, n);
            let nf = n as f64;
            for q in [[0.1, 0.0, 0.0], [0.05, -0.2, 0.1], [-0.01, 0.02, 0.03]] {
                let y = geom::scale(nf.powf(beta), q);
                let r2 = geom::norm2(y);
                let expect =
                    if r2 < 1.0 { geom::scale(nf.powf(4.0 * beta) * -8.0 * (1.0 - r2).powi(3), y) } else { ZERO };
                let got = k.eval_force(q);
                for c in 0..3 {
                    assert!((got[c] - expect[c]).abs() <= 1e-13 * geom::norm(expect).max(1e-300));
                }
            }
        }
    }

    #[test]
    fn g_values() {
        let k = spec(0.1, 1024);
        let l = k.lipschitz();
        assert!((k.eval_g(ZERO) - 32.0 * l).abs() < 1e-12 * l);
        assert!((k.eval_g([0.5 * k.scaled_support(), 0.0, 0.0]) - 32.0 * l).abs() < 1e-12 * l);
        assert_eq!(k.eval_g([10.0 * k.scaled_support(), 0.0, 0.0]), 0.0);
        // monotone in N at the origin
        assert!(spec(0.1, 2048).eval_g(ZERO) > k.eval_g(ZERO));
    }

    #[test]
    fn enlarged_support_radius() {
        let k = KernelSpec::new(BaseProfile::default(), 0.1, 1000, Some(0.05)).unwrap();
        let expect = 1000f64.powf(-0.1) + 2.0 * 3f64.sqrt() * 1000f64.powf(-0.05);
        assert!((k.g_radius() - expect).abs() < 1e-14);
        assert!(k.eval_g([expect * 0.999, 0.0, 0.0]) > 0.0);
    }

    #[test]
    fn invalid_parameters() {
        let p = BaseProfile::default();
        assert_eq!(KernelSpec::new(p, 0.2, 10, None), Err(KernelError::InvalidBeta(0.2)));
        assert_eq!(KernelSpec::new(p, -0.01, 10, None), Err(KernelError::InvalidBeta(-0.01)));
        assert_eq!(KernelSpec::new(p, BETA_MAX, 10, None), Err(KernelError::InvalidBeta(BETA_MAX)));
        assert_eq!(KernelSpec::new(p, 0.1, 0, None), Err(KernelError::InvalidParticleCount));
        assert!(matches!(KernelSpec::new(p, 0.1, 10, Some(-1.0)), Err(KernelError::InvalidAlpha(_))));
        assert!(BaseProfile::new(ProfileShape::PolyBump, 0.0, 1.0).is_err());
    }

    /// Golden-section maximisation of a unimodal function, used as an
    /// independent oracle for the grid supremum.
    fn golden_max(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        f(0.5 * (a + b))
    }

    #[test]
    fn poly_bump_constants() {
        let c = compute_profile_constants(&BaseProfile::default()).unwrap();
        // sup |l| = sup 8 r (1 - r^2)^3, attained at r = 1/sqrt(7)
        let oracle = golden_max(0.0, 1.0, |r| 8.0 * r * (1.0 - r * r).powi(3));
        let closed = 8.0 / 7f64.sqrt() * (6.0f64 / 7.0).powi(3);
        assert!((oracle - closed).abs() < 1e-12);
        assert!((c.sup_l - closed).abs() < 1e-6 * closed);
        // sup of max(|h''|, |h'/r|) is 8, at the origin
        assert!((c.sup_partial[0] - 8.0).abs() < 1e-9);
        assert!((c.lipschitz - 8.0 * 3f64.sqrt()).abs() < 1e-8);
        // int |phi| = 4 pi B(3/2, 5)/2 = 4 pi * 128/3465
        let phi_l1 = 4.0 * PI * 128.0 / 3465.0;
        assert!((c.phi_l1 - phi_l1).abs() < 1e-8 * phi_l1);
        // int |l|^2 = 256 pi int r^4 (1-r^2)^6 dr = 256 pi * 1024/255255
        let l2 = 256.0 * PI * 1024.0 / 255_255.0;
        assert!((c.l_l2_sq - l2).abs() < 1e-8 * l2);
        // int |l| = 32 pi int r^3 (1-r^2)^3 dr = 32 pi / 40
        let l1 = 32.0 * PI / 40.0;
        assert!((c.l_l1 - l1).abs() < 1e-8 * l1);
    }

    #[test]
    fn zero_amplitude_constants_vanish() {
        let p = BaseProfile::new(ProfileShape::PolyBump, 1.0, 0.0).unwrap();
        let c = compute_profile_constants(&p).unwrap();
        assert_eq!(c.lipschitz, 0.0);
        assert_eq!(c.sup_l, 0.0);
        assert_eq!(c.l_l1, 0.0);
        assert_eq!(c.l_l2_sq, 0.0);
        assert_eq!(c.phi_l1, 0.0);
    }

    #[test]
    fn smooth_bump_derivatives_match_finite_differences() {
        let p = BaseProfile::new(ProfileShape::SmoothBump, 1.3, 0.7).unwrap();
        let h = 1e-5;
        for r in [0.1, 0.4, 0.8, 1.1, 1.25] {
            let v = p.radial(r);
            let dh = (p.radial(r + h).h - p.radial(r - h).h) / (2.0 * h);
            let d2h = (p.radial(r + h).h - 2.0 * v.h + p.radial(r - h).h) / (h * h);
            assert!((dh - v.dh_over_r * r).abs() < 1e-6, "r={r}");
            assert!((d2h - v.d2h).abs() < 1e-4 * v.d2h.abs().max(1.0), "r={r}");
        }
        assert_eq!(p.radial(1.3), RadialValues::ZERO);
        assert!(compute_profile_constants(&p).unwrap().lipschitz > 0.0);
    }

    #[test]
    fn l1_norm_of_scaled_phi_is_independent_of_beta() {
        // Radial quadrature of |phi_N| along a ray, independent of the
        // constants' code path.
        let phi_l1 = compute_profile_constants(&BaseProfile::default()).unwrap().phi_l1;
        for beta in [0.0, 0.05, 0.1, 0.14] {
            let n = 777;
            let k = spec(beta, n);
            let rs = k.scaled_support();
            let m = 20_000;
            let dr = rs / m as f64;
            let mut s = 0.0;
            for i in 0..m {
                let r = (i as f64 + 0.5) * dr;
                s += k.eval_phi_scaled([r, 0.0, 0.0]).abs() * r * r;
            }
            let quad = 4.0 * PI * s * dr;
            let expect = phi_l1 / n as f64;
            assert!((quad - expect).abs() < 1e-4 * expect, "beta={beta}");
        }
    }

    #[test]
    fn sign_flip_mutation_breaks_antisymmetry() {
        let k = spec(0.1, 100).with_mutation(KernelMutation::SignFlipNegativeX);
        let q = [0.1, 0.05, 0.0];
        let s = geom::add(k.eval_force(q), k.eval_force(geom::scale(-1.0, q)));
        assert!(geom::norm(s) > 0.0);
    }

    proptest! {
        #[test]
        fn force_is_antisymmetric(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, beta in 0.0f64..0.14, n in 1usize..5000) {
            let k = spec(beta, n);
            let q = [x, y, z];
            let a = k.eval_force(q);
            let b = k.eval_force([-x, -y, -z]);
            prop_assert_eq!(geom::add(a, b), ZERO);
        }

        #[test]
        fn force_bounded_by_sup(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, n in 1usize..5000) {
            let k = spec(0.1, n);
            prop_assert!(geom::norm(k.eval_force([x, y, z])) <= k.force_sup() * (1.0 + 1e-9));
        }
    }

    #[test]
    fn sampled_inequality_checks_pass() {
        for beta in [0.0, 0.1] {
            for n in [64, 2048] {
                let k = spec(beta, n);
                assert!(check_lipschitz(&k, 20_000, 1).passed());
                assert!(check_antisymmetry(&k, 1000, 2).passed());
                let alpha = if beta > 0.0 { 0.05 } else { 0.1 };
                let c = check_domination(&k, alpha, 20_000, 3).unwrap();
                assert!(c.passed() && c.worst_ratio > 0.0, "{c:?}");
            }
        }
    }

    #[test]
    fn sign_flip_is_caught_by_sampled_checks() {
        let k = spec(0.1, 1024).with_mutation(KernelMutation::SignFlipNegativeX);
        assert!(!check_antisymmetry(&k, 1000, 2).passed());
        assert!(!check_lipschitz(&k, 20_000, 1).passed());
    }
}
