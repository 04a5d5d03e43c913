use std::fmt;
use std::net::SocketAddr;

use serde_json::json;

/// Exit code for usage errors and missing input files.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug)]
pub enum CliError {
    Core(facerig_core::Error),
    Usage(String),
    Bind { addr: SocketAddr, source: std::io::Error },
    Io { what: String, source: std::io::Error },
    Failed(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) if is_missing_file(e) => "missing_file",
            CliError::Core(facerig_core::Error::Format { .. }) => "format",
            CliError::Core(facerig_core::Error::Io { .. }) => "io",
            CliError::Core(_) => "invalid_input",
            CliError::Usage(_) => "usage",
            CliError::Bind { .. } => "bind",
            CliError::Io { .. } => "io",
            CliError::Failed(_) => "failed",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if is_missing_file(e) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }

    /// The single JSON line printed on stderr before a nonzero exit.
    pub fn to_line(&self) -> String {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

fn is_missing_file(e: &facerig_core::Error) -> bool {
    matches!(e, facerig_core::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Bind { addr, source } => write!(f, "cannot listen on {addr}: {source}"),
            CliError::Io { what, source } => write!(f, "{what}: {source}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<facerig_core::Error> for CliError {
    fn from(e: facerig_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
