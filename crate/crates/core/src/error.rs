use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        got: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("projection error at {what}: depth {depth} is not positive")]
    Projection { what: String, depth: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("parse error in {file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
