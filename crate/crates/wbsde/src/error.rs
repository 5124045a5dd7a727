//! Crate-wide error type.

/// Errors surfaced by measure primitives, solvers and the verification layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Structurally invalid input: mismatched lengths, empty support,
    /// non-finite entries, bad weights.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A declared bound or precondition on the problem data is violated.
    #[error("config error: {0}")]
    Config(String),

    /// Arguments outside the mathematical domain of an operation
    /// (e.g. score at coincident times, non-positive bandwidth).
    #[error("domain error: {0}")]
    Domain(String),

    /// A grid does not cover enough mass of the reference density.
    #[error("domain coverage: {0}")]
    DomainCoverage(String),

    /// An iterative scheme stopped at `max_iter` with `gap` above tolerance.
    #[error("no convergence after {iterations} iterations (gap {gap:.3e})")]
    NonConvergence { iterations: usize, gap: f64 },

    /// A declared smallness/contraction condition fails, so the requested
    /// single-shot solve is refused.
    #[error("smallness condition violated: {0}")]
    Smallness(String),

    /// Required derivative or bound data was not declared on the input.
    #[error("capability missing: {0}")]
    Capability(String),

    /// Running integrability diagnostic failed (|Z| or |f| averages diverge).
    #[error("integrability diagnostic failed: {0}")]
    Integrability(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: config/input problems exit 2,
    /// non-convergence 3, everything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::Config(_)
            | Error::Domain(_)
            | Error::DomainCoverage(_)
            | Error::Capability(_)
            | Error::Io(_)
            | Error::Serde(_) => 2,
            Error::NonConvergence { .. } | Error::Smallness(_) | Error::Integrability(_) => 3,
        }
    }
}
