//! Constitutive model discovery from sparse displacement data.
//!
//! A Bayesian finite-element update fuses noisy sensor readings with a
//! polynomial-chaos forecast of the displacement field. The posterior mean is
//! then fed to a sparse weak-form regression over a hyperelastic feature
//! library. The two steps alternate until the forecast matches the data.

pub mod config;
pub mod constitutive;
pub mod euclid;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod metrics;
pub mod pce;
pub mod pipeline;
pub mod qp;
pub mod solver;
pub mod statfem;

pub use config::{BenchmarkConfig, ConfigError};
pub use constitutive::{DeformationState, Feature, FeatureLibrary, MaterialParams};
pub use euclid::{DiscoveredModel, EuclidSettings, ParetoPoint, RegressionProblem};
pub use mesh::{Mesh, SensorLayout, SensorSet};
pub use metrics::{EnergyError, InvariantRanges};
pub use pce::{PCExpansion, PceSettings};
pub use pipeline::{
    BaselineOutcome, Benchmark, DiscoveryHistory, IterationRecord, LoopResult, PipelineError, SyntheticData,
};
pub use solver::{DisplacementField, LoadCase, Material, SolverSettings};
pub use statfem::{GaussianField, ObservationSet};
