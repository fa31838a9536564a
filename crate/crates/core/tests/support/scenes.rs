//! Seeded random scenes and trajectories covering pass and fail cases of
//! every rule.

use deskdrive_core::dataset::perturbed_driver;
use deskdrive_core::expert::{expert_trajectory, rollout};
use deskdrive_core::oracle::MetricOracle;
use deskdrive_core::scene::{generate_scene, Difficulty, Scene, Trajectory, Waypoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn random_scene(rng: &mut impl Rng, oracle: &MetricOracle) -> Scene {
    let difficulty = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard][rng.gen_range(0..3)];
    generate_scene(rng.gen(), difficulty, &oracle.world)
}

fn straight(scene: &Scene, speed: f64, accel: f64, n: usize, dt: f64) -> Vec<Waypoint> {
    let p = scene.ego0.pose;
    let (s, c) = p.theta.sin_cos();
    let mut d = 0.0;
    let mut v = speed;
    (0..n)
        .map(|_| {
            v = (v + accel * dt).max(0.0);
            d += v * dt;
            Waypoint::new(p.x + c * d, p.y + s * d, p.theta)
        })
        .collect()
}

pub fn random_trajectory(scene: &Scene, rng: &mut impl Rng, oracle: &MetricOracle) -> Trajectory {
    let world = &oracle.world;
    let (n, dt) = (world.horizon, world.dt);
    let base = || expert_trajectory(scene, oracle).unwrap_or_else(|_| Trajectory::new(straight(scene, scene.ego0.speed, 0.0, n, dt), dt));
    let mut wps = match rng.gen_range(0..8) {
        0 => base().waypoints,
        1 => rollout(scene, &perturbed_driver(scene, rng), oracle).waypoints,
        2 => {
            let sd: f64 = rng.gen_range(0.05..1.0);
            base()
                .waypoints
                .into_iter()
                .map(|w| {
                    Waypoint::new(
                        w.x + sd * rng.sample::<f64, _>(StandardNormal),
                        w.y + sd * rng.sample::<f64, _>(StandardNormal),
                        w.theta + 0.1 * sd * rng.sample::<f64, _>(StandardNormal),
                    )
                })
                .collect()
        }
        3 => straight(scene, rng.gen_range(0.0..15.0), rng.gen_range(-4.0..4.0), n, dt),
        4 => {
            let drift: f64 = rng.gen_range(-3.0..3.0);
            base()
                .waypoints
                .into_iter()
                .enumerate()
                .map(|(k, w)| Waypoint::new(w.x, w.y + drift * (k + 1) as f64 / n as f64, w.theta))
                .collect()
        }
        5 => {
            let mut w = base().waypoints;
            let k = rng.gen_range(0..n);
            let back: f64 = rng.gen_range(0.0..6.0);
            for v in &mut w[k..] {
                v.x -= back;
            }
            w
        }
        6 => vec![scene.ego0.pose; n],
        _ => straight(scene, scene.ego0.speed, rng.gen_range(1.0..6.0), n, dt),
    };
    for w in &mut wps {
        w.theta = deskdrive_core::geometry::wrap_angle(w.theta);
    }
    Trajectory::new(wps, dt)
}

/// `count` reproducible (scene, trajectory) pairs.
pub fn random_pairs(seed: u64, count: usize, oracle: &MetricOracle) -> Vec<(Scene, Trajectory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let scene = random_scene(&mut rng, oracle);
            let traj = random_trajectory(&scene, &mut rng, oracle);
            (scene, traj)
        })
        .collect()
}
