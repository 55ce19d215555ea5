//! Adaptive biasing force sampling on the flat torus.
//!
//! The crate provides overdamped Langevin samplers with standard and
//! tensorized (per-coordinate) adaptive biases, grid estimators for the
//! biasing forces, free-energy reconstruction, deterministic grid oracles
//! (quadrature, the stationary bias pair, a Fokker–Planck evolver) and
//! convergence diagnostics.

pub mod coordinates;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod export;
pub mod free_energy;
pub mod geometry;
pub mod oracle;
pub mod potentials;
pub mod sampler;

pub use coordinates::{CoordinateGroup, CoordinateKind, CoordinateSet, ReactionCoordinate};
pub use error::{Error, Result};
pub use estimator::{BiasFunction1D, BiasGrid1D, BiasGrid2D, BiasGroup, BiasGroupSet, GridSnapshot};
pub use free_energy::{FreeEnergySurface2D, GradientField2D};
pub use geometry::{PeriodicGrid1D, TorusPoint};
pub use oracle::{DensityField2D, StationaryPair};
pub use potentials::{CosineTerm, PotentialSpec, StandardFamily};
pub use sampler::{BiasMode, EnsembleState, EstimatorMode, Simulation, SimulationConfig};
