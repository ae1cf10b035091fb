use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value or combination of values is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A weight or conductance value lies outside the representable range.
    #[error("range error: {0}")]
    Range(String),

    /// Tensor shapes do not agree with the layer or set they are used with.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A file did not follow its documented byte layout.
    #[error("format error in {path}{}: {msg}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format {
        path: PathBuf,
        offset: Option<u64>,
        msg: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: Option<u64>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad input files or configuration rather than
    /// by a violated numerical contract.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Format { .. } | Error::Io { .. } | Error::Csv(_) | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
