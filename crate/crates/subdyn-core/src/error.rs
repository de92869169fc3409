use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("basis dimension {dim} exceeds configured cap {cap}")]
    DimensionCap { dim: usize, cap: usize },

    #[error("quadrature did not converge: max change {change:.3e} > {tol:.3e} on doubling")]
    QuadratureNonConvergence { change: f64, tol: f64 },

    #[error("resolvent shift eps = {eps:.3e} too close to level spacing {spacing:.3e}")]
    EpsilonTooSmall { eps: f64, spacing: f64 },

    #[error("hermiticity violation: residual {residual:.3e} > {tol:.3e}")]
    NotHermitian { residual: f64, tol: f64 },

    #[error("trace identity violated: residual {residual:.3e} > {tol:.3e}")]
    TraceIdentity { residual: f64, tol: f64 },

    #[error("state positivity violation: min eigenvalue {min_eig:.3e}")]
    PositivityViolation { min_eig: f64 },

    #[error("smoothness scan flagged invalid: {0}")]
    SmoothnessInvalid(String),

    #[error("secular cut violated: |E_h - E_k| tau1 / hbar = {0:.3e} >= 1")]
    SecularCut(f64),

    #[error("field fit diverged: {0}")]
    FitDiverged(String),

    #[error("partition function underflow")]
    PartitionUnderflow,

    #[error("linear solve failed: {0}")]
    SolveFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
