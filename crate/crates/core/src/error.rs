use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data or parameters failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// A CSV cell could not be parsed.
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    /// Data does not match the columns a model or file expects.
    #[error("schema error: {0}")]
    Schema(String),

    /// A wave has no treated or no untreated subjects, so the effect is not
    /// identified.
    #[error("estimation refused: wave {wave} has no overlap ({detail})")]
    Overlap { wave: usize, detail: String },

    /// A tree references a feature outside its design matrix, or a node
    /// stream is malformed.
    #[error("structural corruption: {0}")]
    Structure(String),

    #[error("unknown estimator `{0}`")]
    UnknownEstimator(String),

    #[error("unknown forest `{0}`")]
    UnknownForest(String),

    #[error("draw file {path}: {message}")]
    DrawFile { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the error is a refusal to estimate rather than bad input.
    pub fn is_estimation_refused(&self) -> bool {
        matches!(self, Error::Overlap { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
