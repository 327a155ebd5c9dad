use std::path::PathBuf;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("index out of range: {what} = {index}, bound {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid pair: responses must differ (got {0} and {0})")]
    InvalidPair(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("oracle failure: {0}")]
    OracleFailure(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl ToString) -> Self {
        LabError::Parse {
            path: path.into(),
            line,
            msg: msg.to_string(),
        }
    }
}
