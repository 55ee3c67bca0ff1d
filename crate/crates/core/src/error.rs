use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("masked loss needs at least one masked row")]
    EmptyMask,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch} ({stage})")]
    Divergence { stage: &'static str, epoch: usize },

    #[error("label {label} is not one of the classifier's classes")]
    UnknownLabel { label: usize },

    #[error("{0} detector has not been calibrated")]
    Uncalibrated(&'static str),

    #[error("split '{0}' is empty")]
    EmptySplit(&'static str),

    #[error("{}: missing column '{column}'", path.display())]
    MissingColumn { path: PathBuf, column: String },

    #[error("{}: file has no data rows", .0.display())]
    EmptyFile(PathBuf),

    #[error("{}: line {row}: timestamp does not increase", path.display())]
    NonMonotoneTimestamp { path: PathBuf, row: usize },

    #[error("{}: line {row}: {message}", path.display())]
    Row {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("bundle: {0}")]
    Bundle(String),

    #[error("bundle checksum mismatch (expected {expected}, found {found})")]
    Checksum { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by the input data rather than the caller.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn { .. }
                | Error::EmptyFile(_)
                | Error::NonMonotoneTimestamp { .. }
                | Error::Row { .. }
                | Error::EmptySplit(_)
                | Error::EmptyInput(_)
                | Error::UnknownLabel { .. }
                | Error::Csv(_)
                | Error::Bundle(_)
                | Error::Checksum { .. }
                | Error::Json(_)
        )
    }
}
