use std::path::PathBuf;

/// Errors produced by the alignment library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed header: {msg}")]
    MalformedHeader { line: usize, msg: String },

    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: non-finite value")]
    NonFinite { line: usize },

    #[error("line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },

    #[error("expected {expected} rows, found {found}")]
    RowCount { expected: usize, found: usize },

    #[error("line {line}: unknown token {token:?}")]
    UnknownToken { line: usize, token: String },

    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },

    #[error("embedding matrix is empty")]
    EmptyMatrix,

    #[error("k = {k} exceeds the {available} available neighbors")]
    KTooLarge { k: usize, available: usize },

    #[error("index {index} out of bounds for {len} rows")]
    IndexOutOfBounds { index: usize, len: usize },

    #[error("singular local Gram system at point {point}")]
    Singular { point: usize },

    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },

    #[error("lexicon is empty")]
    EmptyLexicon,

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("need at least 2 runs, got {0}")]
    TooFewRuns(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
