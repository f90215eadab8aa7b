//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AvsrError {
    #[error("utterance too short")]
    UtteranceTooShort,

    #[error("silent noise source")]
    SilentNoise,

    #[error("silent utterance")]
    SilentUtterance,

    #[error("babble pool has {pool} utterances, need at least {k}")]
    BabblePoolTooSmall { pool: usize, k: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid label id {0}")]
    InvalidLabel(u32),

    #[error("label too long")]
    LabelTooLong,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),

    #[error("record {id}: {msg}")]
    Record { id: String, msg: String },

    #[error("divergence: non-finite gradient at step {0}")]
    Divergence(u64),

    #[error("empty manifest")]
    EmptyManifest,
}

impl AvsrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AvsrError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AvsrError>;
