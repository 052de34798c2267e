//! Shared fixtures for the criterion benches.

use chaoslab_core::sampling::sample_ensemble;
use chaoslab_core::transport::EmpiricalMeasure;
use chaoslab_core::{BaseProfile, InitialDensity, KernelSpec, ParticleEnsemble};

/// Default kernel and a sampled ensemble of `n` particles.
pub fn fixture(beta: f64, n: usize, seed: u64) -> (KernelSpec, ParticleEnsemble) {
    let spec = KernelSpec::new(BaseProfile::default(), beta, n, None).expect("valid kernel");
    let ensemble = sample_ensemble(&InitialDensity::default(), n, seed).expect("valid density");
    (spec, ensemble)
}

/// Two independent phase-space samples of size `n`.
pub fn measure_pair(n: usize, seed: u64) -> (EmpiricalMeasure, EmpiricalMeasure) {
    let a = sample_ensemble(&InitialDensity::default(), n, seed).expect("valid density");
    let b = sample_ensemble(&InitialDensity::default(), n, seed ^ 0x9e37).expect("valid density");
    (EmpiricalMeasure::from_ensemble(&a).expect("non-empty"), EmpiricalMeasure::from_ensemble(&b).expect("non-empty"))
}
