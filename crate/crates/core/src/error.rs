use thiserror::Error;

/// Errors surfaced by the numeric engine, the model pipeline and file I/O.
#[derive(Debug, Error)]
pub enum HctError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HctError>;

impl HctError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        HctError::Io { path: path.into(), source }
    }
}
