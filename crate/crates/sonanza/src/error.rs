use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] sonanza_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed {what} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        what: &'static str,
        offset: u64,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 for invalid input or configuration, 2 for
    /// failures while running.
    pub fn exit_code(&self) -> i32 {
        use sonanza_core::Error as C;
        match self {
            Error::Core(C::Numeric(_) | C::State(_)) => 2,
            Error::Core(_) => 1,
            Error::Format { .. } | Error::Schema(_) | Error::Validation(_) | Error::Json { .. } | Error::Csv { .. } => 1,
            Error::Io { .. } | Error::Image { .. } => 2,
        }
    }
}
