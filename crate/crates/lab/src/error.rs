use std::path::{Path, PathBuf};

/// Process exit codes are part of the CLI contract: 0 ok, 2 config error,
/// 3 training diverged, 1 anything else.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] csid_core::Error),
    /// Malformed or missing run artifacts.
    #[error("{0}")]
    Artifact(String),
}

impl LabError {
    pub fn config(msg: impl std::fmt::Display) -> LabError {
        LabError::Config(msg.to_string())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            LabError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// `map_err` adapter attaching the offending path.
pub fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
    move |source| LabError::Io { path: path.to_path_buf(), source }
}

pub type Result<T> = std::result::Result<T, LabError>;
