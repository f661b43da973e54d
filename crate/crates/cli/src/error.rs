use thiserror::Error;

/// A failed command, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or values that no file could fix.
    #[error("usage: {0}")]
    Usage(String),

    /// Unreadable, corrupt or mismatched model or dataset.
    #[error("{0}")]
    Data(cbx_core::Error),

    /// Like `Data`, naming the file involved.
    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: cbx_core::Error,
    },

    /// A computation produced NaN or infinity.
    #[error("numeric failure: {0}")]
    Numeric(cbx_core::Error),

    #[error("server: {0}")]
    Server(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::File { .. } | CliError::Server(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<cbx_core::Error> for CliError {
    fn from(e: cbx_core::Error) -> Self {
        use cbx_core::Error as E;
        match e {
            E::NonFiniteValue { .. } => CliError::Numeric(e),
            E::InvalidArgument(msg) | E::ConfigInvalid(msg) => CliError::Usage(msg),
            other => CliError::Data(other),
        }
    }
}

/// Attaches `path` to a data error.
pub fn at(path: &std::path::Path) -> impl FnOnce(cbx_core::Error) -> CliError + '_ {
    move |source| match CliError::from(source) {
        CliError::Data(source) => CliError::File {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Usage(msg.into()))
}
