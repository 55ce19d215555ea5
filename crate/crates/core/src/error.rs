use thiserror::Error;

/// Errors raised by the sampling, estimation and oracle routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value: {0}")]
    NonFinite(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty grid")]
    EmptyGrid,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular Gram matrix (determinant {det:e})")]
    SingularGram { det: f64 },

    #[error(
        "replica {replica}: drift displacement {displacement:.4e} exceeds cap {cap:.4e}; reduce dt"
    )]
    DisplacementCap {
        replica: usize,
        displacement: f64,
        cap: f64,
    },

    #[error("non-finite force sample {sample} deposited at z = {z}")]
    NonFiniteSample { z: f64, sample: f64 },

    #[error("incomplete sampling: {} empty bins (first: {:?})", empty_bins.len(), &empty_bins[..empty_bins.len().min(8)])]
    IncompleteSampling { empty_bins: Vec<usize> },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("histogram has zero total count")]
    ZeroTotalCount,

    #[error("visited region is disconnected into {} components of sizes {sizes:?}", sizes.len())]
    DisconnectedRegion { sizes: Vec<usize> },

    #[error("all unbiasing weights underflow; re-anchor the bias functions")]
    WeightUnderflow,

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("density went negative ({min_density:e}); dt must be below {dt_bound:e}")]
    Stability { min_density: f64, dt_bound: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("support violation: reference density vanishes where the density does not")]
    SupportViolation,

    #[error("bound violation: {0}")]
    BoundViolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
