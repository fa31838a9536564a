use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing dataset: {}", .0.display())]
    MissingDataset(PathBuf),
    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error(transparent)]
    Core(#[from] deskdrive_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    pub fn code(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "invalid_config",
            HarnessError::MissingDataset(_) => "missing_dataset",
            HarnessError::MissingCheckpoint(_) => "missing_checkpoint",
            HarnessError::Core(deskdrive_core::Error::DivergenceDetected(_)) => "divergence",
            HarnessError::Core(deskdrive_core::Error::InvalidConfig(_)) => "invalid_config",
            HarnessError::Core(_) => "runtime",
            HarnessError::Io(_) => "io",
            HarnessError::Json(_) => "json",
        }
    }

    /// Single-line JSON description for machine consumers.
    pub fn to_json_line(&self) -> String {
        let mut v = json!({ "error": self.code(), "message": self.to_string() });
        if let HarnessError::MissingDataset(p) | HarnessError::MissingCheckpoint(p) = self {
            v["path"] = json!(p.display().to_string());
        }
        v.to_string()
    }
}
