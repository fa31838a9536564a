//! Straightforward re-derivation of every rule sub-score: polygon-edge
//! intersection for footprints, exhaustive segment scans for the centerline
//! and a full projection scan for time-to-collision.

use deskdrive_core::config::{OracleConfig, WorldConfig};
use deskdrive_core::expert::expert_trajectory;
use deskdrive_core::oracle::{MetricOracle, MetricVector};
use deskdrive_core::scene::{LightState, Scene, Trajectory};

type P = (f64, f64);

pub fn rect(cx: f64, cy: f64, heading: f64, length: f64, width: f64) -> [P; 4] {
    let (s, c) = heading.sin_cos();
    let mut out = [(0.0, 0.0); 4];
    for (i, (lx, ly)) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)].iter().enumerate() {
        let (lx, ly) = (lx * length / 2.0, ly * width / 2.0);
        out[i] = (cx + c * lx - s * ly, cy + s * lx + c * ly);
    }
    out
}

fn cross(o: P, a: P, b: P) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn on_segment(a: P, b: P, p: P) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

fn segments_touch(a: P, b: P, c: P, d: P) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Point inside (or on) a counter-clockwise convex polygon.
fn inside(poly: &[P; 4], p: P) -> bool {
    (0..4).all(|i| cross(poly[i], poly[(i + 1) % 4], p) >= 0.0)
}

pub fn polygons_intersect(a: &[P; 4], b: &[P; 4]) -> bool {
    for i in 0..4 {
        for j in 0..4 {
            if segments_touch(a[i], a[(i + 1) % 4], b[j], b[(j + 1) % 4]) {
                return true;
            }
        }
    }
    inside(a, b[0]) || inside(b, a[0])
}

/// `(arclength, distance)` of the nearest centerline point; first segment wins ties.
pub fn nearest_on_line(line: &[P], p: P) -> (f64, f64) {
    let mut best = (0.0, f64::INFINITY);
    let mut acc = 0.0;
    for w in line.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let u = ((p.0 - a.0) * (b.0 - a.0) + (p.1 - a.1) * (b.1 - a.1)) / (len * len);
        let u = u.max(0.0).min(1.0);
        let q = (a.0 + u * (b.0 - a.0), a.1 + u * (b.1 - a.1));
        let d = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
        if d < best.1 {
            best = (acc + u * len, d);
        }
        acc += len;
    }
    best
}

pub fn check(scene: &Scene, traj: &Trajectory, world: &WorldConfig, rules: &OracleConfig) -> MetricVector {
    let line: Vec<P> = scene.centerline.points().iter().map(|p| (p.x, p.y)).collect();
    let (l, w, dt) = (world.vehicle_length, world.vehicle_width, traj.dt);
    let n = traj.len();
    let start = (scene.ego0.pose.x, scene.ego0.pose.y);
    let pos: Vec<P> = traj.waypoints.iter().map(|p| (p.x, p.y)).collect();
    let ego_rect = |k: usize| {
        let p = traj.waypoints[k];
        rect(p.x, p.y, p.theta, l, w)
    };
    let agent_rect = |a: usize, step: usize, dx: f64, dy: f64| {
        let ag = &scene.agents[a];
        let p = ag.poses[step];
        rect(p.x + dx, p.y + dy, p.theta, ag.footprint.length, ag.footprint.width)
    };

    // Chord speed, then accel and jerk, starting from the recorded ego state.
    let mut speed = vec![0.0; n];
    let mut accel = vec![0.0; n];
    let mut jerk = vec![0.0; n];
    for k in 0..n {
        let prev = if k == 0 { start } else { pos[k - 1] };
        speed[k] = ((pos[k].0 - prev.0).powi(2) + (pos[k].1 - prev.1).powi(2)).sqrt() / dt;
        let v_prev = if k == 0 { scene.ego0.speed } else { speed[k - 1] };
        accel[k] = (speed[k] - v_prev) / dt;
        let a_prev = if k == 0 { scene.ego0.accel } else { accel[k - 1] };
        jerk[k] = (accel[k] - a_prev) / dt;
    }

    let mut nc: f64 = 1.0;
    for k in 0..n {
        let e = ego_rect(k);
        for a in 0..scene.agents.len() {
            if !polygons_intersect(&e, &agent_rect(a, k + 1, 0.0, 0.0)) {
                continue;
            }
            let c = scene.agents[a].poses[k + 1];
            let h = traj.waypoints[k].theta;
            let along = (c.x - pos[k].0) * h.cos() + (c.y - pos[k].1) * h.sin();
            let not_at_fault = speed[k] < rules.stationary_speed || along < -l / 2.0;
            nc = nc.min(if not_at_fault { 0.5 } else { 0.0 });
        }
    }

    let dac = (0..n).all(|k| {
        ego_rect(k)
            .iter()
            .all(|c| nearest_on_line(&line, *c).1 <= scene.corridor_halfwidth)
    });

    let s0 = nearest_on_line(&line, start).0;
    let s: Vec<f64> = pos.iter().map(|p| nearest_on_line(&line, *p).0).collect();
    let mut back = 0.0;
    let mut reversed = false;
    let mut prev = s0;
    for sk in &s {
        if sk - prev < -rules.reverse_eps {
            reversed = true;
            back += prev - sk;
        }
        prev = *sk;
    }
    let ddc = match (reversed, back < rules.reverse_tolerance) {
        (false, _) => 1.0,
        (true, true) => 0.5,
        (true, false) => 0.0,
    };

    let tlc = match scene.light {
        Some(light) if light.state == LightState::Red && s0 + l / 2.0 <= light.stopline_s => {
            !s.iter().any(|sk| sk + l / 2.0 > light.stopline_s)
        }
        _ => true,
    };

    let mut ttc = true;
    let n_proj = (rules.ttc_horizon / rules.ttc_step).round() as usize;
    for k in 0..n {
        let prev = if k == 0 { start } else { pos[k - 1] };
        let ev = ((pos[k].0 - prev.0) / dt, (pos[k].1 - prev.1) / dt);
        for a in 0..scene.agents.len() {
            let (p1, p0) = (scene.agents[a].poses[k + 1], scene.agents[a].poses[k]);
            let av = ((p1.x - p0.x) / dt, (p1.y - p0.y) / dt);
            for j in 0..=n_proj {
                let d = j as f64 * rules.ttc_step;
                let wp = traj.waypoints[k];
                let e = rect(wp.x + ev.0 * d, wp.y + ev.1 * d, wp.theta, l, w);
                if polygons_intersect(&e, &agent_rect(a, k + 1, av.0 * d, av.1 * d)) {
                    ttc = false;
                }
            }
        }
    }

    let lk = pos.iter().all(|p| nearest_on_line(&line, *p).1 <= rules.lane_keeping_max);
    let hc = accel.iter().all(|a| a.abs() <= rules.comfort_accel) && jerk.iter().all(|j| j.abs() <= rules.comfort_jerk);

    let oracle = MetricOracle::new(world.clone(), rules.clone());
    let reference = match expert_trajectory(scene, &oracle) {
        Ok(e) => {
            let last = e.waypoints.last().unwrap();
            nearest_on_line(&line, (last.x, last.y)).0 - s0
        }
        Err(_) => scene.ego0.speed * world.dt * world.horizon as f64,
    };
    let progress = s.last().map_or(0.0, |sl| sl - s0);
    let ep = if reference < rules.min_reference_progress {
        1.0
    } else {
        (progress / reference).max(0.0).min(1.0)
    };

    let b = |x: bool| if x { 1.0 } else { 0.0 };
    MetricVector {
        nc,
        dac: b(dac),
        ddc,
        tlc: b(tlc),
        ep,
        ttc: b(ttc),
        lk: b(lk),
        hc: b(hc),
        ec: None,
    }
}
