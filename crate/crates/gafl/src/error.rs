use std::path::PathBuf;

/// Errors raised by file handling, configuration and the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] gafl_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed content, located by 1-based line and byte offset.
    #[error("{path}: line {line} (byte {offset}): {message}")]
    Parse { path: PathBuf, line: usize, offset: usize, message: String },
    /// Well-formed content that violates an invariant.
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Whether the error stems from bad input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Core(e) => matches!(
                e,
                gafl_core::Error::Config(_)
                    | gafl_core::Error::Shape(_)
                    | gafl_core::Error::Precondition(_)
                    | gafl_core::Error::UnknownId(_)
            ),
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Parse { .. } | Error::Invalid(_) => true,
        }
    }
}
