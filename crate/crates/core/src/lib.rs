//! Discrete perturbed alpha-Dirac-harmonic maps from flat spin tori.

pub mod diagnostics;
pub mod domain;
pub mod error;
pub mod functional;
pub mod krylov;
pub mod spectral;
pub mod solver;
pub mod spin;
pub mod target;

pub use domain::{DomainSpec, ScalarField, SpinStructure, SurfaceDomain, Twist, VectorField};
pub use error::{Error, Result};
pub use functional::{ActionConfig, ActionValue, MapField, Perturbation, PerturbationHook, TangentField};
pub use spin::{CliffordFrame, PlainSpinorField};
pub use target::{FlatTorus2, HomotopyClass, RoundSphere, Target, TargetManifold};
pub use spectral::{SpectralData, SpectralSign};
pub use solver::{ContinuationSchedule, CriticalKind, CriticalPoint, SolverConfig};
pub use diagnostics::{DiagnosticsReport, Verdict};
