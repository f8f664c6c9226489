use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(i64),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("feature index {index} out of range (num_features = {num_features})")]
    IndexOutOfRange { index: usize, num_features: usize },

    #[error("field {field} out of range (num_fields = {num_fields})")]
    FieldOutOfRange { field: usize, num_fields: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error on {path}: {source}")]
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

    /// Whether the failure is attributable to user-supplied input (data files,
    /// config), as opposed to a failure during computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Config(_)
                | Error::Empty(_)
                | Error::InvalidArgument(_)
                | Error::Io { .. }
                | Error::InvalidLabel(_)
                | Error::IndexOutOfRange { .. }
                | Error::FieldOutOfRange { .. }
                | Error::Checkpoint { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
