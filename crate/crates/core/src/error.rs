use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range. `field` is a dotted path.
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unknown label value {value} in {}", .file.display())]
    UnknownLabelValue { file: PathBuf, value: u8 },

    #[error("failed to load {}: {message}", .file.display())]
    Load { file: PathBuf, message: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: l_sup={l_sup}, l_cons={l_cons}, l_total={l_total}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        l_sup: f64,
        l_cons: f64,
        l_total: f64,
    },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn shape(expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
