use thiserror::Error;

/// Errors shared by every FineNet crate.
///
/// Each variant maps to a short machine-readable category (see
/// [`Error::category`]) that the command-line tool prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Config(String),

    #[error("no landmark record for frame {frame}")]
    DataMissing { frame: String },

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Dependency(String),

    #[error("{0}")]
    Version(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config(_) => "config",
            Error::DataMissing { .. } => "data-missing",
            Error::Data(_) => "data",
            Error::Dependency(_) => "dependency",
            Error::Version(_) => "version",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
