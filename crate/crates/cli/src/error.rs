use std::fmt;
use std::path::{Path, PathBuf};

use pss_core::ErrorKind;

#[derive(Debug)]
pub enum CliError {
    Core(pss_core::Error),
    Io { path: PathBuf, source: std::io::Error },
    Config(String),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// 2 for I/O, 3 for configuration or parse problems, 4 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Io => 2,
                ErrorKind::Parse => 3,
                ErrorKind::Numerical => 4,
            },
            CliError::Io { .. } => 2,
            CliError::Config(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Config(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl From<pss_core::Error> for CliError {
    fn from(e: pss_core::Error) -> Self {
        CliError::Core(e)
    }
}
