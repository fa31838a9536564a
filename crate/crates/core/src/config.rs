//! Configuration blocks for each stage. Every block rejects unknown keys and
//! fills missing keys from its `Default`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// World, vehicle and rasterization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Waypoints per trajectory.
    pub horizon: usize,
    /// Seconds between waypoints.
    pub dt: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub wheelbase: f64,
    pub v_max: f64,
    pub max_accel: f64,
    pub max_curvature: f64,
    pub grid_cell: f64,
    pub grid_pad: f64,
    pub occupancy_buckets: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            dt: 0.5,
            vehicle_length: 4.6,
            vehicle_width: 1.9,
            wheelbase: 2.8,
            v_max: 15.0,
            max_accel: 3.0,
            max_curvature: 0.2,
            grid_cell: 0.5,
            grid_pad: 5.0,
            occupancy_buckets: 4,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.horizon >= 2, "world.horizon must be >= 2")?;
        check(self.dt > 0.0, "world.dt must be > 0")?;
        check(
            self.vehicle_length > 0.0 && self.vehicle_width > 0.0,
            "vehicle dimensions must be > 0",
        )?;
        check(self.grid_cell > 0.0, "world.grid_cell must be > 0")?;
        check(
            self.occupancy_buckets >= 1 && self.occupancy_buckets <= self.horizon,
            "world.occupancy_buckets must be in 1..=horizon",
        )
    }
}

/// Weights of the weighted-average metrics, plus the weights the learned
/// reward uses for the penalty metrics in its normalized weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpdmsWeights {
    pub ttc: f64,
    pub ep: f64,
    pub hc: f64,
    pub lk: f64,
    pub ec: f64,
    pub enable_ec: bool,
    pub nc: f64,
    pub dac: f64,
    pub ddc: f64,
    pub tlc: f64,
}

impl Default for EpdmsWeights {
    fn default() -> Self {
        Self {
            ttc: 5.0,
            ep: 5.0,
            hc: 2.0,
            lk: 2.0,
            ec: 2.0,
            enable_ec: false,
            nc: 14.0,
            dac: 14.0,
            ddc: 14.0,
            tlc: 14.0,
        }
    }
}

impl EpdmsWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.ttc, self.ep, self.hc, self.lk, self.ec, self.nc, self.dac, self.ddc, self.tlc,
        ];
        check(
            all.iter().all(|w| *w > 0.0 && w.is_finite()),
            "all metric weights must be > 0",
        )
    }
}

/// Rule thresholds of the metric oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Below this speed the ego is never at fault for a collision.
    pub stationary_speed: f64,
    /// Backward motion per step smaller than this is ignored.
    pub reverse_eps: f64,
    /// Total reversing distance that still earns the half score.
    pub reverse_tolerance: f64,
    pub ttc_horizon: f64,
    pub ttc_step: f64,
    pub lane_keeping_max: f64,
    pub comfort_accel: f64,
    pub comfort_jerk: f64,
    /// Expert progress below this makes progress trivially satisfied.
    pub min_reference_progress: f64,
    pub ec_accel_tolerance: f64,
    pub ec_jerk_tolerance: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            stationary_speed: 0.1,
            reverse_eps: 1e-3,
            reverse_tolerance: 2.0,
            ttc_horizon: 1.0,
            ttc_step: 0.1,
            lane_keeping_max: 0.75,
            comfort_accel: 3.0,
            comfort_jerk: 5.0,
            min_reference_progress: 1.0,
            ec_accel_tolerance: 1.0,
            ec_jerk_tolerance: 2.0,
        }
    }
}

pub(crate) fn check(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidConfig(msg.to_string()))
    }
}
