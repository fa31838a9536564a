//! Scene/expert records and oracle-labeled reward samples.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::config::{EpdmsWeights, WorldConfig};
use crate::expert::{expert_trajectory, rollout, DriverParams};
use crate::oracle::{aggregate_epdms, MetricOracle, MetricVector};
use crate::policy::{perturb_anchors, NoiseSchedule, SceneContext, TrajCodec};
use crate::scene::{generate_scene, Difficulty, Scene, Trajectory};
use crate::{Error, Result};

pub const SCHEMA_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    DiffusionStep,
    #[serde(rename = "kmeans-K")]
    KmeansK,
    EgoPerturbation,
    Expert,
}

impl Provenance {
    pub const ALL: [Provenance; 4] = [
        Provenance::DiffusionStep,
        Provenance::KmeansK,
        Provenance::EgoPerturbation,
        Provenance::Expert,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Provenance::DiffusionStep => "diffusion-step",
            Provenance::KmeansK => "kmeans-K",
            Provenance::EgoPerturbation => "ego-perturbation",
            Provenance::Expert => "expert",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    /// Unlabeled scenes for reinforcement fine-tuning.
    Rl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Unlabeled scenes for fine-tuning rollouts.
    pub rl_scenes: usize,
    /// Relative frequency of easy, medium and hard scenes.
    pub difficulty_mix: [f64; 3],
    /// Vocabulary sizes fitted during data generation.
    pub anchor_ks: Vec<usize>,
    pub strategies: Vec<Provenance>,
    pub perturbations_per_scene: usize,
    pub diffusion_samples_per_scene: usize,
    pub kmeans_samples_per_scene: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 512,
            eval_scenes: 64,
            rl_scenes: 512,
            difficulty_mix: [0.2, 0.4, 0.4],
            anchor_ks: vec![16, 64, 256],
            strategies: Provenance::ALL.to_vec(),
            perturbations_per_scene: 8,
            diffusion_samples_per_scene: 8,
            kmeans_samples_per_scene: 24,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::config::check;
        check(self.train_scenes > 0, "data.train_scenes must be positive")?;
        check(
            self.difficulty_mix.iter().all(|w| *w >= 0.0) && self.difficulty_mix.iter().sum::<f64>() > 0.0,
            "data.difficulty_mix must be non-negative with a positive sum",
        )?;
        check(
            self.anchor_ks.iter().all(|k| *k > 0 && *k <= self.train_scenes),
            "data.anchor_ks must lie in 1..=train_scenes",
        )?;
        check(!self.strategies.is_empty(), "data.strategies must not be empty")
    }
}

/// A generated scene with its expert demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub version: String,
    pub scene_id: u64,
    pub split: Split,
    pub scene: Scene,
    pub expert: Trajectory,
    pub expert_metrics: MetricVector,
    pub reference_progress: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSample {
    pub version: String,
    pub scene_id: u64,
    pub trajectory: Trajectory,
    pub metrics: MetricVector,
    pub epdms: f64,
    pub provenance: Provenance,
}

/// Scene with its raster, expert and the expert's scores, ready for planning
/// and evaluation.
#[derive(Debug, Clone)]
pub struct Episode {
    pub scene_id: u64,
    pub ctx: SceneContext,
    pub expert: Trajectory,
    pub expert_metrics: MetricVector,
    pub reference_progress: f64,
}

impl Episode {
    pub fn from_record(rec: &SceneRecord, world: &WorldConfig) -> Self {
        Self {
            scene_id: rec.scene_id,
            ctx: SceneContext::new(rec.scene.clone(), world),
            expert: rec.expert.clone(),
            expert_metrics: rec.expert_metrics,
            reference_progress: rec.reference_progress,
        }
    }
}

/// Seed mixer (splitmix64 finalizer over a combined word).
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scene seed for index `i` of a split; streams of different splits never overlap.
pub fn scene_seed(master: u64, split: Split, i: u64) -> u64 {
    let tag = match split {
        Split::Train => 0x7452_4149_4E00_0000,
        Split::Eval => 0x4556_414C_0000_0000,
        Split::Rl => 0x524C_0000_0000_0000,
    };
    mix(mix(master, tag), i)
}

fn pick_difficulty(seed: u64, mix_w: &[f64; 3]) -> Difficulty {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1FF);
    let total: f64 = mix_w.iter().sum();
    let u = rng.gen::<f64>() * total;
    if u < mix_w[0] {
        Difficulty::Easy
    } else if u < mix_w[0] + mix_w[1] {
        Difficulty::Medium
    } else {
        Difficulty::Hard
    }
}

/// Generates `n` scenes with feasible experts; infeasible seeds are skipped.
pub fn build_scenes(master: u64, split: Split, n: usize, cfg: &DataConfig, oracle: &MetricOracle) -> Vec<SceneRecord> {
    let mut out = Vec::with_capacity(n);
    let mut i = 0u64;
    while out.len() < n {
        let seed = scene_seed(master, split, i);
        i += 1;
        let scene = generate_scene(seed, pick_difficulty(seed, &cfg.difficulty_mix), &oracle.world);
        let Ok(expert) = expert_trajectory(&scene, oracle) else {
            continue;
        };
        let reference_progress = oracle.progress(&expert, &scene);
        let Ok(expert_metrics) = oracle.score_with_reference(&expert, &scene, reference_progress) else {
            continue;
        };
        out.push(SceneRecord {
            version: SCHEMA_VERSION.into(),
            scene_id: seed,
            split,
            scene,
            expert,
            expert_metrics,
            reference_progress,
        });
    }
    out
}

/// Randomized driver settings that produce a broad mix of rule outcomes.
pub fn perturbed_driver(scene: &Scene, rng: &mut impl Rng) -> DriverParams {
    let base = DriverParams::compliant(scene);
    let n_cross = base.yield_to.len();
    let lateral_offset = if rng.gen_bool(0.5) {
        rng.gen_range(-0.6..0.6)
    } else {
        rng.gen_range(-2.8..2.8)
    };
    DriverParams {
        lateral_offset,
        cruise_speed: (scene.ego0.speed * rng.gen_range(0.3..1.5)).min(15.0),
        comfort_decel: rng.gen_range(1.0..4.5),
        stop_margin: rng.gen_range(-2.0..4.0),
        accel_limit: rng.gen_range(1.0..5.0),
        jerk_limit: rng.gen_range(2.0..12.0),
        speed_gain: rng.gen_range(0.5..4.0),
        obey_light: rng.gen_bool(0.6),
        follow_lead: rng.gen_bool(0.7),
        yield_to: (0..n_cross).map(|_| rng.gen_bool(0.5)).collect(),
        steer_bias: if rng.gen_bool(0.3) {
            rng.gen_range(-0.15..0.15)
        } else {
            0.0
        },
    }
}

fn label(
    rec: &SceneRecord,
    traj: Trajectory,
    provenance: Provenance,
    oracle: &MetricOracle,
    weights: &EpdmsWeights,
) -> Result<RewardSample> {
    let metrics = oracle.score_with_reference(&traj, &rec.scene, rec.reference_progress)?;
    let epdms = aggregate_epdms(&metrics, &rec.expert_metrics, weights);
    Ok(RewardSample {
        version: SCHEMA_VERSION.into(),
        scene_id: rec.scene_id,
        trajectory: traj,
        metrics,
        epdms,
        provenance,
    })
}

/// Oracle-labeled samples for every scene, one batch per enabled strategy.
pub fn collect_reward_samples(
    scenes: &[SceneRecord],
    anchor_sets: &[AnchorSet],
    cfg: &DataConfig,
    schedule: &NoiseSchedule,
    codec: &TrajCodec,
    oracle: &MetricOracle,
    weights: &EpdmsWeights,
    seed: u64,
) -> Result<Vec<RewardSample>> {
    let mut out = Vec::new();
    for rec in scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, rec.scene_id));
        let dt = rec.expert.dt;
        for &p in &cfg.strategies {
            match p {
                Provenance::Expert => out.push(label(rec, rec.expert.clone(), p, oracle, weights)?),
                Provenance::EgoPerturbation => {
                    for _ in 0..cfg.perturbations_per_scene {
                        let params = perturbed_driver(&rec.scene, &mut rng);
                        let traj = rollout(&rec.scene, &params, oracle);
                        out.push(label(rec, traj, p, oracle, weights)?);
                    }
                }
                Provenance::DiffusionStep => {
                    let clean = vec![codec.encode(&rec.expert)];
                    for _ in 0..cfg.diffusion_samples_per_scene {
                        let t = rng.gen_range(1..=schedule.tau);
                        let noisy = perturb_anchors(&clean, t, schedule, rng.gen());
                        let traj = codec.decode(&noisy[0], dt);
                        out.push(label(rec, traj, p, oracle, weights)?);
                    }
                }
                Provenance::KmeansK => {
                    if anchor_sets.is_empty() {
                        continue;
                    }
                    for _ in 0..cfg.kmeans_samples_per_scene {
                        let set = &anchor_sets[rng.gen_range(0..anchor_sets.len())];
                        let traj = set.anchors[rng.gen_range(0..set.len())].clone();
                        out.push(label(rec, traj, p, oracle, weights)?);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}
