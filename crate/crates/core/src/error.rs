use std::path::PathBuf;

/// Errors raised by the library.
///
/// The CLI maps [`Error::is_config`] errors to exit code 2 and everything
/// else to exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A model or experiment field failed validation.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },
    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),
    /// Caller-supplied data is malformed for the requested operation.
    #[error("input error: {0}")]
    Input(String),
    /// Checkpoint or weights file does not match its binary layout.
    #[error("format error: {0}")]
    Format(String),
    /// A dataset line is not valid JSON.
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    /// A dataset line is valid JSON but violates the record schema.
    #[error("schema error at line {line}: {reason}")]
    Schema { line: usize, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// An experiment stage failed; carries the round and stage name.
    #[error("round {round}, stage {stage}: {source}")]
    Stage {
        round: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Validation { .. } | Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
