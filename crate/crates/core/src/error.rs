use std::path::PathBuf;

/// Errors produced anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {block}: expected {expected}, got {got}")]
    DimensionMismatch {
        block: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("class {class} has {available} samples, balanced split needs {required}")]
    ClassTooSmall {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("zero-norm vector at basis {0}")]
    ZeroNorm(usize),

    #[error("personalized accuracy undefined: client classes absent from the test set")]
    ZeroWeight,

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("malformed input: {0}")]
    Format(String),

    /// Training or personalization diverged.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Every participant of a round failed, so the model cannot advance.
    #[error("round {round}: all {count} participants failed, first: {first}")]
    RoundFailed { round: usize, count: usize, first: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn mismatch(block: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            block: block.into(),
            expected,
            got,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::MissingColumn(_)
                | Error::Format(_)
                | Error::ClassTooSmall { .. }
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
