use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error)]
pub enum FgaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("plane-wave cutoff K={cutoff} is below the potential support K_V={support}")]
    Cutoff { cutoff: usize, support: usize },

    #[error("eigensolver did not converge at node {node:?}")]
    Eigensolver { node: Vec<f64> },

    #[error("gauge fixing failed for band {band} at node {node}: overlap magnitude {overlap:.3e}")]
    GaugeFailure { band: usize, node: usize, overlap: f64 },

    #[error("band {band}: identity and finite-difference gradients disagree by {discrepancy:.3e} (tolerance {tolerance:.3e})")]
    Consistency { band: usize, discrepancy: f64, tolerance: f64 },

    #[error("band {band} is not isolated: min gap {gap:.3e} at xi={xi:?} is below the guard {threshold:.3e}")]
    BandNotIsolated { band: usize, gap: f64, xi: Vec<f64>, threshold: f64 },

    #[error("band {band} is flagged unusable: {reason}")]
    UnusableBand { band: usize, reason: String },

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("quadrature risk: {0}")]
    QuadratureRisk(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("resource refusal: {0}")]
    Resource(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FgaError>;
