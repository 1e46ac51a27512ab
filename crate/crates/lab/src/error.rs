// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing {}: run `medlasa {command}` first", path.display())]
    Upstream {
        path: PathBuf,
        command: &'static str,
    },

    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] medlasa_core::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl std::fmt::Display) -> Self {
        LabError::Format {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    /// Process exit status: 2 config, 3 missing upstream artifact, 4 training
    /// failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Upstream { .. } => 3,
            LabError::Core(medlasa_core::Error::TrainingFailure { .. }) => 4,
            _ => 1,
        }
    }
}
