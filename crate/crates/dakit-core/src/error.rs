use dakit_autodiff::AdError;

/// Errors raised by model construction, sampling, and serialization.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// Invalid model or distribution setup (asymmetric covariance, indefinite
    /// noise, inconsistent dimensions).
    #[error("configuration: {0}")]
    Config(String),

    /// Invalid call arguments (bad sizes, non-integral step ratios).
    #[error("argument: {0}")]
    Argument(String),

    /// Linear-algebra failure; the message carries the observed conditioning.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Inputs outside the mathematical domain of the operation (violated
    /// integrability conditions, vanishing denominators).
    #[error("domain: {0}")]
    Domain(String),

    /// The requested derivative or tape form is not available for this map.
    #[error("unavailable: {0}")]
    Unavailable(&'static str),

    #[error(transparent)]
    Autodiff(#[from] AdError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed file contents (wrong header, gaps in the time index).
    #[error("format: {0}")]
    Format(String),
}
