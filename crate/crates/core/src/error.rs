use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed dialogue record: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("dialogue {dialogue_id}: turn {turn}: {message}")]
    InvalidDialogue {
        dialogue_id: String,
        turn: usize,
        message: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dialogue {dialogue_id} turn {turn}: {message}")]
    Encoding {
        dialogue_id: String,
        turn: usize,
        message: String,
    },

    #[error("sequence of length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dialogue {dialogue_id} turn {turn}: gold addressee required")]
    MissingLabel { dialogue_id: String, turn: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("EM iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Iteration { source, .. } => source.is_config(),
            _ => false,
        }
    }

    /// True for errors caused by numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) => true,
            Error::Iteration { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
