use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("tape already consumed by a previous backward pass")]
    TapeReused,
    #[error("trajectory horizon {traj} exceeds scene horizon {scene}")]
    HorizonMismatch { traj: usize, scene: usize },
    #[error("no compliant expert trajectory exists for this scene")]
    ExpertInfeasible,
    #[error("k-means needs at least {k} demonstrations, got {got}")]
    TooFewDemos { k: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite value detected in {0}")]
    DivergenceDetected(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
