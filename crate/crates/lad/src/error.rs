use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum LadError {
    #[error("invalid label value {value} for {num_classes} classes (expected < {num_classes} or the ignore sentinel)")]
    InvalidLabel { value: u8, num_classes: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged: non-finite loss at iteration {iteration} ({detail})")]
    NanLoss { iteration: usize, detail: String },

    #[error("dataset file {path}: {reason}")]
    DatasetFile { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("no class has any ground-truth or predicted pixels; mIoU is undefined")]
    EmptyConfusion,
}

impl LadError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        LadError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        LadError::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad input (usage, missing files, incompatible
    /// artifacts) rather than internal failures. The CLI maps these to exit 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            LadError::InvalidLabel { .. }
                | LadError::InvalidConfig(_)
                | LadError::DatasetFile { .. }
                | LadError::Checkpoint { .. }
                | LadError::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, LadError>;
