use std::path::PathBuf;

/// Errors surfaced by the IO layer and the command-line driver.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] smartensemble_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// `pointer` is a JSON pointer into the offending document.
    #[error("{}: at {pointer}: {message}", path.display())]
    Config {
        path: PathBuf,
        pointer: String,
        message: String,
    },

    #[error("{}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for an aborted training run, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(smartensemble_core::Error::Diverged(_)) => 2,
            _ => 1,
        }
    }
}
