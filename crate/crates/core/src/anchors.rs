//! Anchor vocabulary: k-means over demonstration trajectories.
//!
//! Distances use flattened `(x, y)` only. Centroid headings are the circular
//! mean of member headings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scene::{Trajectory, Waypoint};
use crate::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorMeta {
    pub demos: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub created_by: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub anchors: Vec<Trajectory>,
    pub meta: AnchorMeta,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.anchors.first().map_or(0, Trajectory::len)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Per-iteration inertia of a fit, recorded after every assignment step.
#[derive(Debug, Clone, PartialEq)]
pub struct FitLog {
    pub inertia: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Index of the nearest anchor in flattened-position L2; ties go to the lowest index.
pub fn assign(traj: &Trajectory, anchors: &AnchorSet) -> usize {
    let p = traj.positions();
    let mut best = (0, f64::INFINITY);
    for (i, a) in anchors.anchors.iter().enumerate() {
        let d = sq_dist(&p, &a.positions());
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

pub fn kmeans_fit(demos: &[Trajectory], k: usize, seed: u64) -> Result<AnchorSet> {
    kmeans_fit_logged(demos, k, seed, DEFAULT_MAX_ITER).map(|(set, _)| set)
}

pub fn kmeans_fit_logged(
    demos: &[Trajectory],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(AnchorSet, FitLog)> {
    if k == 0 || demos.len() < k {
        return Err(Error::TooFewDemos {
            k,
            got: demos.len(),
        });
    }
    let horizon = demos[0].len();
    let dt = demos[0].dt;
    if let Some(bad) = demos.iter().find(|d| d.len() != horizon) {
        return Err(Error::HorizonMismatch {
            traj: bad.len(),
            scene: horizon,
        });
    }
    let points: Vec<Vec<f64>> = demos.iter().map(Trajectory::positions).collect();

    // Farthest-point seeding.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let mut far = 0;
        for (i, d) in min_d.iter().enumerate() {
            if *d > min_d[far] {
                far = i;
            }
        }
        let c = points[far].clone();
        for (p, d) in points.iter().zip(min_d.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }

    let mut labels = vec![usize::MAX; points.len()];
    let mut log = FitLog {
        inertia: Vec::new(),
        converged: false,
    };
    for _ in 0..max_iter {
        let mut changed = false;
        let mut inertia = 0.0;
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            let (i, d) = nearest(p, &centers);
            inertia += d;
            if *l != i {
                *l = i;
                changed = true;
            }
        }
        log.inertia.push(inertia);
        if !changed {
            log.converged = true;
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            for (j, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[j]).sum::<f64>() / n;
            }
        }
    }

    let anchors = centers
        .iter()
        .enumerate()
        .map(|(c, center)| {
            let members: Vec<&Trajectory> = demos
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == c)
                .map(|(d, _)| d)
                .collect();
            let waypoints = (0..horizon)
                .map(|w| {
                    let (sin, cos) = members.iter().fold((0.0, 0.0), |(s, co), m| {
                        let th = m.waypoints[w].theta;
                        (s + th.sin(), co + th.cos())
                    });
                    let theta = if members.is_empty() {
                        heading_from_positions(center, w)
                    } else {
                        sin.atan2(cos)
                    };
                    Waypoint::new(center[2 * w], center[2 * w + 1], theta)
                })
                .collect();
            Trajectory::new(waypoints, dt)
        })
        .collect();

    let set = AnchorSet {
        k,
        seed,
        anchors,
        meta: AnchorMeta {
            demos: demos.len(),
            iterations: log.inertia.len(),
            inertia: log.inertia.last().copied().unwrap_or(0.0),
            created_by: "kmeans".into(),
        },
    };
    Ok((set, log))
}

fn heading_from_positions(flat: &[f64], w: usize) -> f64 {
    let (px, py) = if w == 0 {
        (0.0, 0.0)
    } else {
        (flat[2 * w - 2], flat[2 * w - 1])
    };
    (flat[2 * w + 1] - py).atan2(flat[2 * w] - px)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(speed: f64, lateral: f64) -> Trajectory {
        Trajectory::new(
            (1..=8)
                .map(|k| Waypoint::new(speed * 0.5 * k as f64, lateral, 0.0))
                .collect(),
            0.5,
        )
    }

    #[test]
    fn too_few_demos() {
        let demos = vec![straight(5.0, 0.0)];
        assert!(matches!(kmeans_fit(&demos, 2, 0), Err(Error::TooFewDemos { k: 2, got: 1 })));
    }

    #[test]
    fn k_distinct_demos_become_anchors() {
        let demos: Vec<_> = (0..5).map(|i| straight(4.0 + i as f64, 0.1 * i as f64)).collect();
        let set = kmeans_fit(&demos, 5, 3).unwrap();
        for d in &demos {
            assert!(set.anchors.iter().any(|a| a == d));
        }
    }

    #[test]
    fn single_cluster_is_mean() {
        let mut a = straight(4.0, 1.0);
        let mut b = straight(6.0, -1.0);
        a.waypoints[0].theta = 0.3;
        b.waypoints[0].theta = -0.1;
        let set = kmeans_fit(&[a.clone(), b.clone()], 1, 0).unwrap();
        let w = set.anchors[0].waypoints[0];
        assert!((w.x - 2.5).abs() < 1e-12);
        assert!(w.y.abs() < 1e-12);
        assert!((w.theta - 0.1).abs() < 1e-12);
    }

    #[test]
    fn assign_self_and_ties() {
        let demos: Vec<_> = (0..4).map(|i| straight(3.0 + 2.0 * i as f64, 0.0)).collect();
        let set = kmeans_fit(&demos, 4, 1).unwrap();
        for (i, a) in set.anchors.iter().enumerate() {
            assert_eq!(assign(a, &set), i);
        }
        let mut tie = set.clone();
        tie.anchors = vec![straight(4.0, 1.0), straight(4.0, -1.0)];
        assert_eq!(assign(&straight(4.0, 0.0), &tie), 0);
    }

    #[test]
    fn json_roundtrip() {
        let demos: Vec<_> = (0..6).map(|i| straight(3.0 + i as f64, 0.2 * i as f64)).collect();
        let set = kmeans_fit(&demos, 3, 9).unwrap();
        let json = serde_json::to_string(&set).unwrap();
        assert!(json.contains("\"K\":3"));
        let back: AnchorSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }
}
