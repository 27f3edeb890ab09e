use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("inconsistent state: {0}")]
    State(String),

    #[error("missing artifact {path} (run stage `{stage}` first)")]
    Dependency { stage: String, path: PathBuf },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable class name, used by the CLI and the C API.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::Singularity(_) => "singularity",
            Error::State(_) => "state",
            Error::Dependency { .. } => "dependency",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) => 2,
            Error::Config(_) => 3,
            Error::Singularity(_) => 4,
            Error::State(_) => 5,
            Error::Dependency { .. } => 6,
            Error::Format(_) => 7,
            Error::Io(_) => 8,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $kind:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$kind(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
