//! Error taxonomy shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or parameter shapes do not conform.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is out of its admissible range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An API contract was violated (wrong variant, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data failed validation (gaps, duplicates, empty splits, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A value could not be parsed from an input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Result sets cannot be aggregated (missing cells).
    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// A numeric argument lies outside the function's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A checkpoint file is malformed or inconsistent with its config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
