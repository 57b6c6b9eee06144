use thiserror::Error;

/// Errors produced anywhere in the binding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("attention row has no allowed key")]
    EmptyAttentionRow,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("instance `{0}` owns no grid cell after overlap resolution")]
    EmptyInstanceRegion(String),

    #[error("unknown instance `{0}`")]
    UnknownInstance(String),

    #[error("non-finite token state at sampling step {step}")]
    NumericalDivergence { step: usize },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
