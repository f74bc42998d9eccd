use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("name count mismatch: {rows} rows but {names} names")]
    NameCountMismatch { rows: usize, names: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNorm { row: usize },

    #[error("name at index {index} is empty or contains a line break")]
    InvalidName { index: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("at least {required} classes are required, found {found}")]
    TooFewClasses { required: usize, found: usize },

    #[error("training diverged at iteration {iteration}: non-finite loss")]
    Divergence { iteration: usize },

    #[error("non-finite intermediate value in {0}")]
    Numerical(&'static str),

    #[error("non-finite gradient entry at ({row}, {col})")]
    NonFiniteGradient { row: usize, col: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("unknown class label `{0}`")]
    UnknownLabel(String),

    #[error("class `{0}` has no images")]
    EmptyClass(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("duplicate index {0}")]
    DuplicateIndex(usize),

    #[error("missing mask for patch grid `{0}`")]
    MissingMask(String),

    #[error("invalid mask {path}: {reason}")]
    InvalidMask { path: PathBuf, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numerical failures (divergence, non-finite intermediates) as opposed
    /// to input validation failures.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::NonFiniteGradient { .. } | Error::Numerical(_)
        )
    }
}
