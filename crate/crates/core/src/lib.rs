//! Desk-scale driving policy pipeline: a 2D micro-driving world with a
//! rule-based scorer, an anchored diffusion trajectory planner trained by
//! imitation, a reward model learned from the scorer, and PPO fine-tuning of
//! the planner against that learned reward.

pub mod anchors;
pub mod config;
pub mod dataset;
pub mod diffgraph;
pub mod error;
pub mod eval;
pub mod expert;
pub mod geometry;
pub mod oracle;
pub mod policy;
pub mod raster;
pub mod rl;
pub mod rwm;
pub mod scene;

pub use error::{Error, Result};
