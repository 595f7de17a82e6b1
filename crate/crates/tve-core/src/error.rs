//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by dataset construction, fitting, and estimation.
#[derive(Debug, Error)]
pub enum TveError {
    /// A size precondition was violated (empty data, m > n, bad fold count, ...).
    #[error("invalid size: {0}")]
    InvalidSize(String),

    /// An input contained non-finite or otherwise unusable values.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A CSV file did not match the declared schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// No usable rows remained after ingestion.
    #[error("empty data: {0}")]
    EmptyData(String),

    /// I/O failure while reading or writing files.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// CSV parsing failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// The logistic fit diverged, indicating (quasi-)separated data.
    #[error("separation: coefficients diverged (|beta|_inf = {max_abs_beta:.3} after {iterations} iterations)")]
    Separation { max_abs_beta: f64, iterations: usize },

    /// A dataset contains only one treatment arm, so no propensity model exists.
    #[error("positivity-degenerate: {0}")]
    PositivityDegenerate(String),

    /// Every candidate model failed to fit.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// A treatment-specific mean fell below the floor, making ratios unusable.
    #[error("psi-degenerate: {0}")]
    PsiDegenerate(String),

    /// A whole Monte-Carlo scenario produced no usable replications.
    #[error("scenario failed: {0}")]
    Scenario(String),
}

pub type Result<T> = std::result::Result<T, TveError>;
