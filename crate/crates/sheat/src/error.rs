use std::path::PathBuf;

use serde::Serialize;

/// Failure of a command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("assertion failed: {0}")]
    Assertion(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type RunResult<T> = std::result::Result<T, RunError>;

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Io { .. } => 1,
            Self::Numerical(_) => 2,
            Self::Assertion(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Numerical(_) => "numerical",
            Self::Assertion(_) => "assertion",
            Self::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// One-line JSON for stderr.
    pub fn diagnostic(&self) -> String {
        #[derive(Serialize)]
        struct Diagnostic<'a> {
            error: &'a str,
            exit_code: i32,
            message: String,
        }
        let d = Diagnostic { error: self.kind(), exit_code: self.exit_code(), message: self.to_string() };
        serde_json::to_string(&d).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", self.kind()))
    }
}

impl From<sheat_core::Error> for RunError {
    fn from(e: sheat_core::Error) -> Self {
        use sheat_core::Error as E;
        match e {
            E::Domain(_) | E::Unsupported(_) | E::Mismatch(_) => Self::Config(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        Self::Io { path: PathBuf::new(), source: std::io::Error::other(e) }
    }
}

impl From<serde_json::Error> for RunError {
    fn from(e: serde_json::Error) -> Self {
        Self::Io { path: PathBuf::new(), source: std::io::Error::other(e) }
    }
}
