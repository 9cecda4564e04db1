//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("element {element} references node id {node} but only {nodes} nodes exist")]
    NodeIdOutOfRange {
        element: usize,
        node: usize,
        nodes: usize,
    },
    #[error("element {element} is degenerate: {msg}")]
    DegenerateElement { element: usize, msg: String },
    #[error("nesting violation: level-0 node {node0} at ({x}, {y}) has no counterpart on level {level}")]
    NestingViolation {
        node0: usize,
        level: usize,
        x: f64,
        y: f64,
    },
    #[error("dirichlet and neumann sets overlap at node {0}")]
    BoundaryOverlap(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum FemError {
    #[error("material at element {element}, gauss point {gauss} is not symmetric positive definite")]
    MaterialNotSpd { element: usize, gauss: usize },
    #[error("material supplied for {got} gauss points, mesh needs {want}")]
    MaterialCount { got: usize, want: usize },
    #[error("system is singular or indefinite: {0}")]
    Singular(String),
    #[error("solver residual {residual:e} exceeds tolerance {tol:e}")]
    ResidualTooLarge { residual: f64, tol: f64 },
    #[error("displacement field is on level {field} but hierarchy query asked for level {want}")]
    LevelMismatch { field: usize, want: usize },
}

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("truncation order {m} exceeds reference mesh node count {nodes}")]
    OrderTooLarge { m: usize, nodes: usize },
    #[error("covariance matrix not positive semi-definite: eigenvalue {0:e}")]
    NotPsd(f64),
    #[error("correlation length must be positive, got {0}")]
    BadCorrelationLength(f64),
    #[error("point ({x}, {y}) lies outside the reference mesh")]
    PointOutsideDomain { x: f64, y: f64 },
    #[error("coefficient row has length {got}, basis order is {want}")]
    CoefficientLength { got: usize, want: usize },
    #[error("basis cache file {path} is malformed: {msg}")]
    BadCache { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum MaterialError {
    #[error("dispersion {name} = {value} outside (0, 1)")]
    DispersionRange { name: &'static str, value: f64 },
    #[error("calibration infeasible: delta_T = {0} falls outside (0, 1)")]
    CalibrationInfeasible(f64),
    #[error("mean elasticity matrix is not symmetric positive definite")]
    MeanNotSpd,
    #[error("gamma shape parameter a_{index} = {value} is not positive (dispersion too large)")]
    BadGammaShape { index: usize, value: f64 },
    #[error("germ value is not finite")]
    NonFiniteGerm,
}

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {need} samples, have {have}")]
    InsufficientSamples { need: usize, have: usize },
    #[error("sample vector length {got} does not match accumulator width {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("coarse vector present at level 0 / absent above level 0")]
    CoarsePresence,
}

#[derive(Debug, Error)]
pub enum MlmcError {
    #[error("rate fit needs at least 2 usable level points, have {0}")]
    FitUnderdetermined(usize),
    #[error("normalization constant is zero; estimates vanish everywhere")]
    DegenerateNormalization,
    #[error("adaptive loop exceeded {cap} iterations; last achieved {achieved:e} vs target {target:e}")]
    NoConvergence {
        cap: usize,
        achieved: f64,
        target: f64,
    },
    #[error("sample {sample_id} failed: {source}")]
    SampleFailed {
        sample_id: u64,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Umbrella error for callers that mix subsystems.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Mlmc(#[from] MlmcError),
}
