//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or layout mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// An iterative kernel exhausted its budget without converging.
    #[error("convergence failure: {context} (residual {residual:.3e})")]
    Convergence { context: String, residual: f64 },

    /// Input violates a domain precondition (invalid label, empty set, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// The alignment phase failed to reach its criterion within budget.
    #[error("setup error: {0}")]
    Setup(String),

    /// A run-time invariant was violated; names the invariant.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    /// Corrupt or incompatible serialized artifact.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable kind tag, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Convergence { .. } => "convergence",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Setup(_) => "setup",
            Error::Invariant(_) => "invariant",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Format(_) => "format",
        }
    }
}
