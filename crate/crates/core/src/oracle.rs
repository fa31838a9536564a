//! Rule-based trajectory scorer producing the closed-loop sub-metrics and
//! their penalty-times-weighted-average aggregate.

use serde::{Deserialize, Serialize};

use crate::config::{EpdmsWeights, OracleConfig, WorldConfig};
use crate::expert;
use crate::geometry::{OrientedBox, Point};
use crate::scene::{LightState, Scene, Trajectory};
use crate::{Error, Result};

/// Sub-metric identifiers in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Nc,
    Dac,
    Ddc,
    Tlc,
    Ep,
    Ttc,
    Lk,
    Hc,
    Ec,
}

impl Metric {
    /// The eight metrics learned by the reward model.
    pub const LEARNED: [Metric; 8] = [
        Metric::Nc,
        Metric::Dac,
        Metric::Ddc,
        Metric::Tlc,
        Metric::Ep,
        Metric::Ttc,
        Metric::Lk,
        Metric::Hc,
    ];
    pub const PENALTY: [Metric; 4] = [Metric::Nc, Metric::Dac, Metric::Ddc, Metric::Tlc];
    pub const AVERAGE: [Metric; 5] = [Metric::Ttc, Metric::Ep, Metric::Hc, Metric::Lk, Metric::Ec];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Nc => "NC",
            Metric::Dac => "DAC",
            Metric::Ddc => "DDC",
            Metric::Tlc => "TLC",
            Metric::Ep => "EP",
            Metric::Ttc => "TTC",
            Metric::Lk => "LK",
            Metric::Hc => "HC",
            Metric::Ec => "EC",
        }
    }

    /// Legal values for discrete metrics; `None` for the continuous EP.
    pub fn domain(self) -> Option<&'static [f64]> {
        match self {
            Metric::Nc | Metric::Ddc => Some(&[0.0, 0.5, 1.0]),
            Metric::Ep => None,
            _ => Some(&[0.0, 1.0]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub nc: f64,
    pub dac: f64,
    pub ddc: f64,
    pub tlc: f64,
    pub ep: f64,
    pub ttc: f64,
    pub lk: f64,
    pub hc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ec: Option<f64>,
}

impl MetricVector {
    pub fn all_pass() -> Self {
        Self {
            nc: 1.0,
            dac: 1.0,
            ddc: 1.0,
            tlc: 1.0,
            ep: 1.0,
            ttc: 1.0,
            lk: 1.0,
            hc: 1.0,
            ec: None,
        }
    }

    pub fn get(&self, m: Metric) -> Option<f64> {
        Some(match m {
            Metric::Nc => self.nc,
            Metric::Dac => self.dac,
            Metric::Ddc => self.ddc,
            Metric::Tlc => self.tlc,
            Metric::Ep => self.ep,
            Metric::Ttc => self.ttc,
            Metric::Lk => self.lk,
            Metric::Hc => self.hc,
            Metric::Ec => return self.ec,
        })
    }

    pub fn set(&mut self, m: Metric, v: f64) {
        match m {
            Metric::Nc => self.nc = v,
            Metric::Dac => self.dac = v,
            Metric::Ddc => self.ddc = v,
            Metric::Tlc => self.tlc = v,
            Metric::Ep => self.ep = v,
            Metric::Ttc => self.ttc = v,
            Metric::Lk => self.lk = v,
            Metric::Hc => self.hc = v,
            Metric::Ec => self.ec = Some(v),
        }
    }

    /// Every present field lies in its legal domain.
    pub fn is_valid(&self) -> bool {
        Metric::LEARNED
            .iter()
            .chain(std::iter::once(&Metric::Ec))
            .all(|&m| match (self.get(m), m.domain()) {
                (None, _) => true,
                (Some(v), Some(dom)) => dom.contains(&v),
                (Some(v), None) => (0.0..=1.0).contains(&v),
            })
    }
}

/// Per-step finite-difference kinematics of a trajectory, anchored at the
/// ego start state (speed from chord length, accel from speed, jerk from accel).
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub speeds: Vec<f64>,
    pub accels: Vec<f64>,
    pub jerks: Vec<f64>,
}

impl Kinematics {
    pub fn of(traj: &Trajectory, scene: &Scene) -> Self {
        let dt = traj.dt;
        let mut prev = scene.ego0.pose.point();
        let mut v_prev = scene.ego0.speed;
        let mut a_prev = scene.ego0.accel;
        let n = traj.len();
        let mut out = Self {
            speeds: Vec::with_capacity(n),
            accels: Vec::with_capacity(n),
            jerks: Vec::with_capacity(n),
        };
        for w in &traj.waypoints {
            let v = prev.dist(w.point()) / dt;
            let a = (v - v_prev) / dt;
            let j = (a - a_prev) / dt;
            out.speeds.push(v);
            out.accels.push(a);
            out.jerks.push(j);
            prev = w.point();
            v_prev = v;
            a_prev = a;
        }
        out
    }
}

/// Scores trajectories against scenes under fixed world and rule settings.
#[derive(Debug, Clone, Default)]
pub struct MetricOracle {
    pub world: WorldConfig,
    pub rules: OracleConfig,
}

impl MetricOracle {
    pub fn new(world: WorldConfig, rules: OracleConfig) -> Self {
        Self { world, rules }
    }

    fn ego_box(&self, traj: &Trajectory, k: usize) -> OrientedBox {
        traj.waypoints[k].footprint(self.world.vehicle_length, self.world.vehicle_width)
    }

    /// Scores a trajectory; the progress reference is the scene's expert.
    pub fn score_trajectory(&self, traj: &Trajectory, scene: &Scene) -> Result<MetricVector> {
        let reference = self.reference_progress(scene);
        self.score_with_reference(traj, scene, reference)
    }

    /// Progress of the expert on `scene`, falling back to cruising at the
    /// start speed when the expert is infeasible.
    pub fn reference_progress(&self, scene: &Scene) -> f64 {
        match expert::expert_trajectory(scene, self) {
            Ok(t) => self.progress(&t, scene),
            Err(_) => scene.ego0.speed * self.world.dt * self.world.horizon as f64,
        }
    }

    /// Signed centerline progress of the final waypoint relative to the start.
    pub fn progress(&self, traj: &Trajectory, scene: &Scene) -> f64 {
        let s0 = scene.centerline.project(scene.ego0.pose.point()).s;
        match traj.waypoints.last() {
            Some(w) => scene.centerline.project(w.point()).s - s0,
            None => 0.0,
        }
    }

    pub fn score_with_reference(
        &self,
        traj: &Trajectory,
        scene: &Scene,
        reference_progress: f64,
    ) -> Result<MetricVector> {
        let limit = match scene.sim_steps() {
            usize::MAX => self.world.horizon,
            steps => steps - 1,
        };
        if traj.len() > limit {
            return Err(Error::HorizonMismatch {
                traj: traj.len(),
                scene: limit,
            });
        }
        let mut m = self.rule_scores(traj, scene);
        let progress = self.progress(traj, scene);
        m.ep = if reference_progress < self.rules.min_reference_progress {
            1.0
        } else {
            (progress / reference_progress).clamp(0.0, 1.0)
        };
        Ok(m)
    }

    /// Every sub-metric except EP (left at 1.0). Assumes the horizon was checked.
    pub fn rule_scores(&self, traj: &Trajectory, scene: &Scene) -> MetricVector {
        let kin = Kinematics::of(traj, scene);
        let mut m = MetricVector::all_pass();
        m.nc = self.no_collision(traj, scene, &kin);
        m.dac = self.drivable_area(traj, scene);
        let projections: Vec<_> = traj
            .waypoints
            .iter()
            .map(|w| scene.centerline.project(w.point()))
            .collect();
        m.ddc = self.direction_compliance(scene, &projections);
        m.tlc = self.light_compliance(scene, &projections);
        m.ttc = self.time_to_collision(traj, scene);
        m.lk = if projections
            .iter()
            .all(|p| p.distance <= self.rules.lane_keeping_max)
        {
            1.0
        } else {
            0.0
        };
        m.hc = if kin.accels.iter().all(|a| a.abs() <= self.rules.comfort_accel)
            && kin.jerks.iter().all(|j| j.abs() <= self.rules.comfort_jerk)
        {
            1.0
        } else {
            0.0
        };
        m
    }

    fn no_collision(&self, traj: &Trajectory, scene: &Scene, kin: &Kinematics) -> f64 {
        let mut score: f64 = 1.0;
        for k in 0..traj.len() {
            let ego = self.ego_box(traj, k);
            for agent in &scene.agents {
                let other = agent.box_at(k + 1);
                if !ego.overlaps(&other) {
                    continue;
                }
                let stationary = kin.speeds[k] < self.rules.stationary_speed;
                let from_behind = ego.to_local(other.center).x < -self.world.vehicle_length / 2.0;
                let s = if stationary || from_behind { 0.5 } else { 0.0 };
                score = score.min(s);
            }
        }
        score
    }

    fn drivable_area(&self, traj: &Trajectory, scene: &Scene) -> f64 {
        let hw = scene.corridor_halfwidth;
        let inside = (0..traj.len()).all(|k| {
            self.ego_box(traj, k)
                .corners()
                .iter()
                .all(|c| scene.centerline.project(*c).distance <= hw)
        });
        if inside {
            1.0
        } else {
            0.0
        }
    }

    fn direction_compliance(&self, scene: &Scene, proj: &[crate::geometry::Projection]) -> f64 {
        let mut prev = scene.centerline.project(scene.ego0.pose.point()).s;
        let mut reversed = 0.0;
        let mut any = false;
        for p in proj {
            let ds = p.s - prev;
            if ds < -self.rules.reverse_eps {
                reversed += -ds;
                any = true;
            }
            prev = p.s;
        }
        if !any {
            1.0
        } else if reversed < self.rules.reverse_tolerance {
            0.5
        } else {
            0.0
        }
    }

    fn light_compliance(&self, scene: &Scene, proj: &[crate::geometry::Projection]) -> f64 {
        let Some(light) = scene.light else {
            return 1.0;
        };
        if light.state != LightState::Red {
            return 1.0;
        }
        let half = self.world.vehicle_length / 2.0;
        let start_front = scene.centerline.project(scene.ego0.pose.point()).s + half;
        if start_front > light.stopline_s {
            return 1.0;
        }
        if proj.iter().any(|p| p.s + half > light.stopline_s) {
            0.0
        } else {
            1.0
        }
    }

    fn time_to_collision(&self, traj: &Trajectory, scene: &Scene) -> f64 {
        let dt = traj.dt;
        let n_proj = (self.rules.ttc_horizon / self.rules.ttc_step).round() as usize;
        let mut prev = scene.ego0.pose.point();
        for k in 0..traj.len() {
            let w = traj.waypoints[k];
            let ev = Point::new((w.x - prev.x) / dt, (w.y - prev.y) / dt);
            prev = w.point();
            for agent in &scene.agents {
                let av = agent.velocity(k + 1, dt);
                let base = agent.box_at(k + 1);
                for j in 0..=n_proj {
                    let d = j as f64 * self.rules.ttc_step;
                    let mut ego = self.ego_box(traj, k);
                    ego.center = Point::new(ego.center.x + ev.x * d, ego.center.y + ev.y * d);
                    let mut other = base;
                    other.center = Point::new(other.center.x + av.x * d, other.center.y + av.y * d);
                    if ego.overlaps(&other) {
                        return 0.0;
                    }
                }
            }
        }
        1.0
    }

    /// Two-run comfort consistency: 1 when peak |accel| and peak |jerk| of the
    /// two runs agree within tolerance.
    pub fn score_ec(&self, a: &Trajectory, b: &Trajectory) -> f64 {
        let (pa, ja) = comfort_peaks(a);
        let (pb, jb) = comfort_peaks(b);
        if (pa - pb).abs() < self.rules.ec_accel_tolerance
            && (ja - jb).abs() < self.rules.ec_jerk_tolerance
        {
            1.0
        } else {
            0.0
        }
    }
}

/// Peak |accel| and |jerk| from waypoint differences alone.
fn comfort_peaks(t: &Trajectory) -> (f64, f64) {
    let dt = t.dt;
    let v: Vec<f64> = t
        .waypoints
        .windows(2)
        .map(|w| w[0].point().dist(w[1].point()) / dt)
        .collect();
    let a: Vec<f64> = v.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let j: Vec<f64> = a.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let peak = |xs: &[f64]| xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    (peak(&a), peak(&j))
}

/// Penalty metrics are waived when the human demonstration itself fails them.
fn filtered(m: Metric, agent: &MetricVector, human: &MetricVector) -> Option<f64> {
    let a = agent.get(m)?;
    if m == Metric::Ep {
        return Some(a);
    }
    match human.get(m) {
        Some(h) if h < 1.0 => Some(1.0),
        _ => Some(a),
    }
}

/// Product of filtered penalty terms times the weighted mean of filtered
/// average terms. EC participates only when enabled and present in `agent`.
pub fn aggregate_epdms(agent: &MetricVector, human: &MetricVector, weights: &EpdmsWeights) -> f64 {
    let penalty: f64 = Metric::PENALTY
        .iter()
        .map(|&m| filtered(m, agent, human).unwrap_or(1.0))
        .product();
    let mut num = 0.0;
    let mut den = 0.0;
    for m in Metric::AVERAGE {
        let w = match m {
            Metric::Ttc => weights.ttc,
            Metric::Ep => weights.ep,
            Metric::Hc => weights.hc,
            Metric::Lk => weights.lk,
            Metric::Ec if weights.enable_ec => weights.ec,
            _ => continue,
        };
        let Some(v) = filtered(m, agent, human) else {
            continue;
        };
        num += w * v;
        den += w;
    }
    penalty * num / den
}
