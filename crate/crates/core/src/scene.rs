//! Scene and trajectory types plus the procedural scene generator.
//!
//! Every scene is expressed in the ego frame at time zero: the ego starts at
//! the origin heading along +x, and the centerline passes through the origin
//! with a +x tangent there. Trajectories, anchors and policy outputs all live
//! in this frame, so no per-scene transform is needed anywhere downstream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::WorldConfig;
use crate::geometry::{wrap_angle, OrientedBox, Point, Polyline};

/// Arclength of the ego start along every generated centerline.
pub const EGO_START_S: f64 = 10.0;
const CENTERLINE_AHEAD: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn footprint(&self, length: f64, width: f64) -> OrientedBox {
        OrientedBox::new(self.point(), self.theta, length, width)
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.theta > -std::f64::consts::PI
            && self.theta <= std::f64::consts::PI
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Waypoint>, dt: f64) -> Self {
        Self { waypoints, dt }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Flattened `[x0, y0, x1, y1, ...]`, headings excluded.
    pub fn positions(&self) -> Vec<f64> {
        self.waypoints.iter().flat_map(|w| [w.x, w.y]).collect()
    }

    /// Checks the structural invariants and the speed limit implied by
    /// waypoint spacing (the first step is measured from the origin).
    pub fn satisfies_invariants(&self, cfg: &WorldConfig) -> bool {
        if self.waypoints.len() != cfg.horizon || self.dt <= 0.0 {
            return false;
        }
        if !self.waypoints.iter().all(Waypoint::is_valid) {
            return false;
        }
        let mut prev = Point::new(0.0, 0.0);
        self.waypoints.iter().all(|w| {
            let ok = prev.dist(w.point()) / self.dt <= cfg.v_max + 1e-9;
            prev = w.point();
            ok
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub pose: Waypoint,
    pub speed: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Lead,
    Crossing,
}

/// Non-reactive agent: one pose per simulation step, step 0 at time zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub kind: AgentKind,
    pub footprint: Footprint,
    pub poses: Vec<Waypoint>,
}

impl AgentTrack {
    pub fn box_at(&self, step: usize) -> OrientedBox {
        self.poses[step].footprint(self.footprint.length, self.footprint.width)
    }

    /// Finite-difference velocity at `step` (forward difference at step 0).
    pub fn velocity(&self, step: usize, dt: f64) -> Point {
        let (a, b) = if step == 0 {
            (self.poses[0], self.poses[1])
        } else {
            (self.poses[step - 1], self.poses[step])
        };
        Point::new((b.x - a.x) / dt, (b.y - a.y) / dt)
    }

    /// Linear interpolation of the position at continuous time `t`.
    pub fn position_at(&self, t: f64, dt: f64) -> Point {
        let last = self.poses.len() - 1;
        let f = (t / dt).clamp(0.0, last as f64);
        let i = (f.floor() as usize).min(last.saturating_sub(1));
        let u = f - i as f64;
        let (a, b) = (self.poses[i], self.poses[(i + 1).min(last)]);
        Point::new(a.x + u * (b.x - a.x), a.y + u * (b.y - a.y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LightState {
    Green,
    Red,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub state: LightState,
    /// Arclength of the stop line along the centerline.
    pub stopline_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    Follow,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Command {
    pub const ALL: [Command; 4] = [
        Command::Follow,
        Command::TurnLeft,
        Command::TurnRight,
        Command::Stop,
    ];

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self as usize] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl std::str::FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Self::Easy),
            "medium" => Ok(Self::Medium),
            "hard" => Ok(Self::Hard),
            other => Err(format!("unknown difficulty `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub centerline: Polyline,
    pub corridor_halfwidth: f64,
    pub agents: Vec<AgentTrack>,
    pub light: Option<TrafficLight>,
    pub ego0: EgoState,
    pub command: Command,
    pub dt: f64,
}

impl Scene {
    /// Number of recorded agent steps (time zero included).
    pub fn sim_steps(&self) -> usize {
        self.agents.first().map_or(usize::MAX, |a| a.poses.len())
    }

    pub fn is_valid(&self, cfg: &WorldConfig) -> bool {
        self.centerline.is_valid()
            && self.corridor_halfwidth > cfg.vehicle_width / 2.0
            && self.ego0.speed >= 0.0
            && self.agents.iter().all(|a| {
                a.poses.len() == cfg.horizon + 1
                    && a.footprint.length > 0.0
                    && a.footprint.width > 0.0
            })
    }
}

/// Deterministic procedural scene for `(seed, difficulty)`.
///
/// * Easy: straight empty road, no signal.
/// * Medium: optional curve, optional slower lead vehicle, optional signal.
/// * Hard: at least one agent crossing the corridor plus a signal.
///
/// Signals and crossing points are always placed beyond comfortable stopping
/// distance so a compliant trajectory exists.
pub fn generate_scene(seed: u64, difficulty: Difficulty, cfg: &WorldConfig) -> Scene {
    let tag = match difficulty {
        Difficulty::Easy => 0x11,
        Difficulty::Medium => 0x22,
        Difficulty::Hard => 0x33,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag);

    let v0: f64 = rng.gen_range(5.0..12.0);
    let halfwidth: f64 = rng.gen_range(1.75..2.25);
    let curvature = match difficulty {
        Difficulty::Easy => 0.0,
        Difficulty::Medium | Difficulty::Hard => {
            if rng.gen_bool(0.5) {
                let k: f64 = rng.gen_range(0.006..0.02);
                if rng.gen_bool(0.5) {
                    k
                } else {
                    -k
                }
            } else {
                0.0
            }
        }
    };
    let curve_start: f64 = rng.gen_range(5.0..30.0);
    let curve_len: f64 = rng.gen_range(30.0..60.0);
    let centerline = build_centerline(curvature, curve_start, curve_len);

    let stop_dist = v0 * v0 / 4.0;
    let mut agents = Vec::new();
    let mut light = None;
    match difficulty {
        Difficulty::Easy => {}
        Difficulty::Medium => {
            if rng.gen_bool(0.5) {
                agents.push(lead_agent(&mut rng, &centerline, v0, cfg));
            }
            if rng.gen_bool(0.5) {
                light = Some(random_light(&mut rng, stop_dist));
            }
        }
        Difficulty::Hard => {
            agents.push(crossing_agent(&mut rng, &centerline, v0, cfg));
            if rng.gen_bool(0.25) {
                agents.push(crossing_agent(&mut rng, &centerline, v0, cfg));
            }
            if rng.gen_bool(0.3) {
                agents.push(lead_agent(&mut rng, &centerline, v0, cfg));
            }
            light = Some(random_light(&mut rng, stop_dist));
        }
    }

    let command = derive_command(&centerline, light.as_ref(), v0, cfg);
    Scene {
        seed,
        difficulty,
        centerline,
        corridor_halfwidth: halfwidth,
        agents,
        light,
        ego0: EgoState {
            pose: Waypoint::new(0.0, 0.0, 0.0),
            speed: v0,
            accel: 0.0,
        },
        command,
        dt: cfg.dt,
    }
}

fn build_centerline(curvature: f64, curve_start: f64, curve_len: f64) -> Polyline {
    let mut pts = Vec::new();
    let mut s = -EGO_START_S;
    while s < 0.0 {
        pts.push(Point::new(s, 0.0));
        s += 1.0;
    }
    let (mut x, mut y, mut h) = (0.0f64, 0.0f64, 0.0f64);
    pts.push(Point::new(x, y));
    let ds = 1.0;
    let mut s = 0.0;
    while s < CENTERLINE_AHEAD {
        // Ramp curvature in and out over 10 m.
        let k = if s < curve_start || s > curve_start + curve_len {
            0.0
        } else {
            let ramp = ((s - curve_start) / 10.0)
                .min((curve_start + curve_len - s) / 10.0)
                .clamp(0.0, 1.0);
            curvature * ramp
        };
        let mid = h + 0.5 * k * ds;
        x += ds * mid.cos();
        y += ds * mid.sin();
        h += k * ds;
        s += ds;
        pts.push(Point::new(x, y));
    }
    Polyline::from(pts)
}

fn random_light(rng: &mut ChaCha8Rng, stop_dist: f64) -> TrafficLight {
    let lo = (stop_dist + 8.0).max(20.0);
    let rel = rng.gen_range(lo..lo.max(50.0) + 10.0);
    TrafficLight {
        state: if rng.gen_bool(0.5) {
            LightState::Red
        } else {
            LightState::Green
        },
        stopline_s: EGO_START_S + rel,
    }
}

fn lead_agent(rng: &mut ChaCha8Rng, line: &Polyline, v0: f64, cfg: &WorldConfig) -> AgentTrack {
    let speed = v0 * rng.gen_range(0.3..0.8);
    let closing = v0 - speed;
    let lo = (closing * closing / 3.0 + 14.0).max(22.0);
    let gap = rng.gen_range(lo..lo + 20.0);
    let footprint = Footprint {
        length: rng.gen_range(4.0..5.0),
        width: rng.gen_range(1.7..2.0),
    };
    let poses = (0..=cfg.horizon)
        .map(|k| {
            let s = EGO_START_S + gap + speed * k as f64 * cfg.dt;
            let (p, h) = line.pose_at(s);
            Waypoint::new(p.x, p.y, h)
        })
        .collect();
    AgentTrack {
        kind: AgentKind::Lead,
        footprint,
        poses,
    }
}

fn crossing_agent(
    rng: &mut ChaCha8Rng,
    line: &Polyline,
    v0: f64,
    cfg: &WorldConfig,
) -> AgentTrack {
    let lo = (v0 * v0 / 4.0 + 9.0).max(20.0);
    let rel = rng.gen_range(lo..lo + 25.0);
    let speed: f64 = rng.gen_range(3.0..7.0);
    // Time at which the agent reaches the centerline, near the ego's naive arrival.
    let t_cross = (rel / v0 + rng.gen_range(-1.5..1.0)).clamp(0.5, 3.5);
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let (c, h) = line.pose_at(EGO_START_S + rel);
    let normal = Point::new(-h.sin(), h.cos());
    let heading = (-side * normal.y).atan2(-side * normal.x);
    let footprint = Footprint {
        length: rng.gen_range(4.0..5.0),
        width: rng.gen_range(1.7..2.0),
    };
    let poses = (0..=cfg.horizon)
        .map(|k| {
            let t = k as f64 * cfg.dt;
            let off = side * speed * (t_cross - t);
            Waypoint::new(c.x + normal.x * off, c.y + normal.y * off, heading)
        })
        .collect();
    AgentTrack {
        kind: AgentKind::Crossing,
        footprint,
        poses,
    }
}

fn derive_command(
    line: &Polyline,
    light: Option<&TrafficLight>,
    v0: f64,
    cfg: &WorldConfig,
) -> Command {
    if matches!(light, Some(l) if l.state == LightState::Red) {
        return Command::Stop;
    }
    let reach = EGO_START_S + v0 * cfg.dt * cfg.horizon as f64;
    let (_, h) = line.pose_at(reach);
    if h > 0.15 {
        Command::TurnLeft
    } else if h < -0.15 {
        Command::TurnRight
    } else {
        Command::Follow
    }
}
