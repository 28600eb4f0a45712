use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Location of a schema violation inside a corpus file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataLocation {
    pub dialogue_id: Option<String>,
    pub path: String,
}

impl fmt::Display for DataLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.dialogue_id {
            Some(id) => write!(f, "dialogue {id:?} at {}", self.path),
            None => write!(f, "{}", self.path),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of range for size {bound} ({context})")]
    Index {
        index: usize,
        bound: usize,
        context: &'static str,
    },

    #[error("unknown vocabulary item {item:?} ({level})")]
    Vocabulary { item: String, level: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("load error in {location}: {message}")]
    Load {
        location: DataLocation,
        message: String,
    },

    #[error("ontology error on line {line}: {message}")]
    Ontology { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match data: {0}")]
    Mismatch(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Load { .. }
            | Error::Ontology { .. }
            | Error::Checkpoint(_)
            | Error::Mismatch(_)
            | Error::Vocabulary { .. }
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::Dimension { .. }
            | Error::Contract(_)
            | Error::Index { .. }
            | Error::Numeric(_) => 3,
        }
    }
}
