use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmclError {
    #[error(transparent)]
    Core(#[from] lmcl_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {detail}")]
    Parse { path: PathBuf, line: u64, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, LmclError>;

impl LmclError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LmclError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for check failures and divergence, 2 for usage,
    /// config and input errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            LmclError::ChecksFailed { .. } => 1,
            LmclError::Core(lmcl_core::Error::Diverged { .. } | lmcl_core::Error::NonFinite { .. }) => 1,
            _ => 2,
        }
    }

    /// Short machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            LmclError::Core(lmcl_core::Error::Diverged { .. }) => "diverged",
            LmclError::Core(lmcl_core::Error::NonFinite { .. }) => "non_finite",
            LmclError::Core(lmcl_core::Error::Infeasible { .. }) => "infeasible",
            LmclError::Core(_) => "invalid",
            LmclError::Io { .. } => "io",
            LmclError::Parse { .. } => "parse",
            LmclError::Config(_) => "config",
            LmclError::Checkpoint { .. } => "checkpoint",
            LmclError::ChecksFailed { .. } => "checks_failed",
        }
    }
}
