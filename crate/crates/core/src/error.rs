use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("ingestion error at data row {row}: {message}")]
    Ingestion { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate system: {0}")]
    Degenerate(String),

    #[error("training diverged at epoch {epoch} ({stage} stage): {message}")]
    Training {
        stage: &'static str,
        epoch: usize,
        message: String,
    },

    #[error("incompatible configuration: {0}")]
    Incompatible(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Data-related failures are reported differently by frontends than numeric ones.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_) | Error::Ingestion { .. } | Error::Validation(_) | Error::Io { .. }
        )
    }

    pub fn is_numeric_error(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::Degenerate(_) | Error::Training { .. }
        )
    }
}
