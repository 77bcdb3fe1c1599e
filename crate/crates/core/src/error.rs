//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;

/// Failure classes surfaced by the library.
///
/// `Config`, `Input`, `Domain` and `NotFound` describe problems with what the
/// caller asked for; `Numerical` describes a computation that started from
/// valid inputs but broke down (divergence, non-convergence, non-finite
/// intermediates) and carries enough context to locate the failure.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A parameter or configuration value is structurally invalid.
    #[error("config error: {0}")]
    Config(String),

    /// Runtime data handed to an operation is unusable (wrong shape,
    /// non-finite entries, missing attribute values, ...).
    #[error("input error: {0}")]
    Input(String),

    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A requested quantity does not exist in the searched range.
    #[error("not found: {0}")]
    NotFound(String),

    /// A numerical procedure failed or diverged.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// True when the failure is numerical rather than a usage problem.
    pub fn is_numerical(&self) -> bool {
        matches!(self, CoreError::Numerical(_))
    }
}
