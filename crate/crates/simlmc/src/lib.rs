//! Scale-invariant multilevel Monte Carlo for 2D linear elasticity with a
//! random anisotropic elasticity-matrix field.
//!
//! The crate estimates the mean and variance of the total-displacement field
//! of a plane-stress problem whose elasticity matrix is a random SPD field
//! (maximum-entropy fluctuation around an anisotropic mean). Sampling error
//! is controlled through t-statistic style normalized mean-squared errors,
//! so stopping rules and sample allocations do not depend on the physical
//! scale of the quantity of interest.
//!
//! Everything numeric is generic over the scalar type (see [`real::Real`]);
//! the aliases below fix `f64`, which all stated tolerances assume.

pub mod error;
pub mod fem;
pub mod field;
pub mod material;
pub mod mesh;
pub mod mlmc;
pub mod problem;
pub mod real;
pub mod sparse;
pub mod special;
pub mod stats;

pub use error::Error;
pub use real::{real, Real};

/// f64 instantiations of the main types, as used by the CLI.
pub type Mesh = mesh::Mesh2D<f64>;
pub type Hierarchy = mesh::MeshHierarchy<f64>;
pub type Displacement = fem::DisplacementField<f64>;
pub type Basis = field::KleBasis<f64>;
pub type Mean = material::MeanElasticity<f64>;
pub type Problem = problem::ElasticityProblem<f64>;
pub type Accumulator = stats::LevelAccumulator<f64>;
pub type Report = mlmc::RunReport<f64>;
