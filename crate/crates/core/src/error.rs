use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure classes of the
/// public operations: shape/dimension problems, bad configuration, bad
/// runtime inputs, on-disk format problems, and API misuse.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("checkpoint corruption: {0}")]
    Corrupt(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("non-finite loss at stage {stage} (step {step})")]
    NonFiniteLoss { stage: usize, step: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
