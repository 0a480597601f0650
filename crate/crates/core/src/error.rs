use thiserror::Error;

/// Errors raised while reading or writing checkpoints.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version (found {found}, expected {expected})")]
    Version { found: String, expected: u32 },
    #[error("truncated checkpoint: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint size mismatch: {0}")]
    SizeMismatch(String),
    #[error("cannot serialize: {0}")]
    Unsupported(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate shape: every amplitude is zero")]
    DegenerateShape,
    #[error("non-finite {param} on primitive {id}")]
    NonFinite { id: usize, param: &'static str },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("relocation with n = {0} copies exceeds the supported cap")]
    RelocationCap(usize),
    #[error("no live primitives available as relocation donors")]
    NoDonors,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
