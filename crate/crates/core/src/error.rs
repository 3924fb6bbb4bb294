use thiserror::Error;

use crate::solver::QotSolution;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-positive density sample {value:.3e} at node {node}")]
    NonPositiveDensity { node: usize, value: f64 },
    #[error("density outside the declared bounds: min {min:.3e}, max {max:.3e}")]
    DensityOutOfBounds { min: f64, max: f64 },
    #[error("grid has no cells along axis {0}")]
    EmptyGrid(usize),
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("non-finite value at node {0}")]
    NonFiniteValue(usize),
    #[error("measures do not sum to one (total mass {0:.15})")]
    NotNormalized(f64),
    #[error("unsupported dimension {0} (expected 1, 2 or 3)")]
    UnsupportedDimension(usize),
    #[error("Hessian of g* is not positive definite (min eigenvalue {0:.3e})")]
    NotPositiveDefinite(f64),
    #[error("invalid family parameters: {0}")]
    InvalidFamily(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("instance too large for the exact solver: {n0} x {n1} (cap {cap} points per side)")]
    TooLarge { n0: usize, n1: usize, cap: usize },
    #[error("eps must be positive and finite, got {0}")]
    InvalidEps(f64),
    #[error("not a coupling: {0}")]
    NotACoupling(String),
    #[error("eps list must be strictly decreasing with at least {0} entries")]
    InvalidEpsList(usize),
    #[error("plan bandwidth {bandwidth:.3e} spans {cells:.1} cells, need at least {required}")]
    BandwidthUnderResolved { bandwidth: f64, cells: f64, required: f64 },
    #[error("eps = {eps:.3e} too large for delta = {delta:.3e}: support radius {radius:.3e}")]
    EpsTooLargeForDelta { eps: f64, delta: f64, radius: f64 },
    #[error("empty region")]
    EmptyRegion,
    #[error("frame target {value:.6} outside [1/3, 1] at node {node}")]
    TargetOutOfRange { node: usize, value: f64 },
    #[error("map is not injective: {0}")]
    MapNotInjective(String),
    #[error("no convergence after {} iterations (defect {:.3e})", .0.stats.iterations, .0.stats.defect)]
    NoConvergence(Box<QotSolution>),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
