use thiserror::Error;

/// Errors surfaced by the adaptation pipeline.
#[derive(Debug, Error)]
pub enum DynaError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite data: {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Recombined spectrum was not consistent with a real image.
    #[error("inconsistent spectrum: imaginary residue {residue:.3e} exceeds {limit:.3e}")]
    SpectralResidue { residue: f64, limit: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DynaError>;
