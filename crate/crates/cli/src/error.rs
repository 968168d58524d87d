use std::path::PathBuf;

use thiserror::Error;
use ulfdti_net::NetError;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Input {
        path: PathBuf,
        #[source]
        source: ulfdti::Error,
    },
    #[error(transparent)]
    Core(#[from] ulfdti::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

fn core_code(e: &ulfdti::Error) -> i32 {
    use ulfdti::Error::*;
    match e {
        Argument(_) => EXIT_USAGE,
        Io { .. } | Format(_) | Unsupported(_) | Corruption(_) | Parse(_) | Json(_) | Csv(_) => EXIT_FORMAT,
        DegenerateGeometry(_) | Underdetermined(_) | Numerical(_) | Undefined(_) | DegenerateField(_) => {
            EXIT_NUMERICAL
        }
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Json(_) => EXIT_FORMAT,
            CliError::Input { source, .. } | CliError::Core(source) => core_code(source),
            CliError::Net(e) => match e {
                NetError::Core(c) => core_code(c),
                NetError::Config(_) | NetError::State(_) => EXIT_USAGE,
                NetError::NonFiniteLoss { .. } => EXIT_NUMERICAL,
                _ => EXIT_FORMAT,
            },
        }
    }
}

/// Attach the offending file to a core error.
pub trait WithPath<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> WithPath<T> for ulfdti::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| CliError::Input {
            path: path.to_path_buf(),
            source,
        })
    }
}
