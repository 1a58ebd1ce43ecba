use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Inconsistent or invalid configuration (parameters, windows, manifests).
    #[error("configuration error: {0}")]
    Config(String),
    /// Measured or loaded data is impossible or malformed.
    #[error("data error: {0}")]
    Data(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// The requested output does not fit in the configured memory budget.
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
