//! Numerical laboratory for the mean-field limit of N-particle systems with
//! N-scaled, compactly supported pair potentials.
//!
//! The crate couples the interacting Newtonian flow (`nbody`) with a
//! reference-ensemble realisation of the mean-field characteristic flow
//! (`meanfield`) from shared random initial data (`sampling`), tracks the
//! clamped distance process and the exceptional sets along the run
//! (`coupling`), measures law-of-large-numbers fluctuations (`stats`) and
//! empirical Wasserstein distances (`transport`). `harness` ties everything
//! to config files, parameter sweeps, fits and validation suites.

pub mod cells;
pub mod coupling;
pub mod geom;
pub mod grid;
pub mod harness;
pub mod kernel;
pub mod meanfield;
pub mod nbody;
pub mod sampling;
pub mod stats;
pub mod transport;

pub use coupling::{CoupledTrajectory, CouplingParams, RunSummary, StepRecord};
pub use geom::Vec3;
pub use kernel::{BaseProfile, KernelSpec, ProfileConstants, ProfileShape};
pub use meanfield::{MeanFieldConfig, MeanFieldMode, ReferenceFlow};
pub use nbody::{ForceMode, Integrator, NewtonianFlowConfig};
pub use sampling::{InitialDensity, MomentumProfile, ParticleEnsemble, SpatialProfile};
pub use stats::FluctuationRecord;
pub use transport::EmpiricalMeasure;
