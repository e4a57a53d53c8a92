//! Error type shared by all estimation and simulation modules.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or vector dimensions do not match what the operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument is outside its admissible domain (sizes, fractions, signs).
    #[error("domain error: {0}")]
    Domain(String),

    /// The regressor cross-product is singular; `columns` names the offenders.
    #[error("collinear regressors: {}", columns.join(", "))]
    Collinearity { columns: Vec<String> },

    /// A covariance matrix that must be positive definite is not.
    #[error("degenerate covariance: {0}")]
    Degeneracy(String),

    /// Restriction-file or data-file syntax problem, located by line/column.
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    /// A structural requirement on a restriction pattern is violated.
    #[error("invalid restriction pattern: {0}")]
    Pattern(String),

    /// Non-finite values appeared during a numeric computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Every optimization start failed; `details` carries per-start diagnostics.
    #[error("optimization failed: {details}")]
    Optimization { details: String },

    /// The rank condition failed where it was required to hold.
    #[error("identification failure: {0}")]
    Identification(String),

    /// A relative-IRF normalization divided by a near-zero impact response.
    #[error("normalization error in regime {regime}: {msg}")]
    Normalization { regime: usize, msg: String },

    /// Invalid run configuration (missing seed, nonexistent file, ...).
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
