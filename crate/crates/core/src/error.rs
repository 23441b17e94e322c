use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("matrix is not symmetric within tolerance (max asymmetry {max_asym:.3e}, scale {scale:.3e})")]
    NotSymmetric { max_asym: f64, scale: f64 },

    #[error("matrix is not positive semi-definite within tolerance (lambda_min {lambda_min:.3e}, lambda_max {lambda_max:.3e})")]
    NotPsd { lambda_min: f64, lambda_max: f64 },

    #[error("integrand returned a non-finite value at sample {sample:?}")]
    NonFiniteIntegrand { sample: Vec<f64> },

    #[error("non-finite objective value at x = {x}")]
    NonFiniteObjective { x: f64 },

    #[error(
        "all thresholding weights vanished (every category excluded by the null-space convention)"
    )]
    AllWeightsZero,

    #[error("pseudo-inverse failed at iteration {iteration}, node {node}: {reason}")]
    PinvFailure {
        iteration: usize,
        node: usize,
        reason: String,
    },

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("histograms are inconsistent: no assignment has positive posterior mass")]
    InconsistentHistograms,

    #[error("partition block {block} has zero probability mass")]
    ZeroMassBlock { block: usize },

    #[error("state evolution projection exceeded noise level: entry ({r},{s}) = {value:.3e}, allowance {allowance:.3e}")]
    ProjectionTooLarge {
        r: usize,
        s: usize,
        value: f64,
        allowance: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed binary instance: {0}")]
    MalformedBinary(String),
}

pub type Result<T> = std::result::Result<T, Error>;
