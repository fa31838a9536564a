//! Command-line harness: configuration, the three training stages,
//! evaluation, batch scoring and the imitation-weight ablation.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
