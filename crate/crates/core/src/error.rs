use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("index {index} out of range for {bound} classes")]
    Index { index: usize, bound: usize },
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-deterministic loss: {0}")]
    Determinism(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("binding error: {0}")]
    Binding(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Degenerate(_) => "degenerate",
            Error::Validation(_) => "validation",
            Error::Index { .. } => "index",
            Error::Lookup(_) => "lookup",
            Error::Config(_) => "config",
            Error::Determinism(_) => "determinism",
            Error::Sampling(_) => "sampling",
            Error::Alignment(_) => "alignment",
            Error::Binding(_) => "binding",
            Error::NonFinite(_) => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
