use thiserror::Error;

/// Errors surfaced by the library.
///
/// Variants map onto the CLI exit-code classes: validation (2),
/// numerical (3) and I/O (4).
#[derive(Debug, Error)]
pub enum EqlenError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl EqlenError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        EqlenError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        EqlenError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            EqlenError::InvalidInput(_) | EqlenError::Config { .. } | EqlenError::Serde(_) => 2,
            EqlenError::Numerical(_) => 3,
            EqlenError::Io { .. } | EqlenError::Csv(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, EqlenError>;
