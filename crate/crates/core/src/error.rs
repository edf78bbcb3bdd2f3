use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DppError>;

#[derive(Debug, Error)]
pub enum DppError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("item index {index} out of range for catalog of {num_items} items")]
    IndexOutOfRange { index: usize, num_items: usize },

    #[error("singular minor for basket {0:?}")]
    Singular(Vec<usize>),

    #[error("observed set has zero probability: {0:?}")]
    Conditioning(Vec<usize>),

    #[error("negative generation failed: {0}")]
    Generation(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("model format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
