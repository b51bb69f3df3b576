//! Error type shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// `Config` and `Parse` indicate bad user input (rejected before any work
/// starts); the remaining variants indicate runtime failures. The CLI maps
/// the former to exit code 2 and the latter to exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or inconsistent configuration combination.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid electrode geometry (zero-norm position, duplicate name, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Malformed input file (montage, dataset metadata, checkpoint, config).
    #[error("parse error: {0}")]
    Parse(String),

    /// A documented precondition of an operation was violated at runtime.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A metric is undefined for the given confusion matrix.
    #[error("metric error: {0}")]
    Metric(String),

    /// An evaluation-protocol rule rejects the requested run.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Non-finite value produced where finite math is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by invalid user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse(_))
    }
}
