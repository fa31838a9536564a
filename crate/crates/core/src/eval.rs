//! Closed-loop style evaluation of planners with the metric oracle.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::config::EpdmsWeights;
use crate::dataset::Episode;
use crate::diffgraph::ParamBundle;
use crate::oracle::{aggregate_epdms, Metric, MetricOracle, MetricVector};
use crate::policy::DiffusionPolicy;
use crate::scene::Trajectory;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene_id: u64,
    pub metrics: MetricVector,
    pub epdms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenes: usize,
    pub mean_metrics: Vec<(String, f64)>,
    pub mean_epdms: f64,
}

pub fn score_episode(
    ep: &Episode,
    traj: &Trajectory,
    oracle: &MetricOracle,
    weights: &EpdmsWeights,
) -> Result<SceneScore> {
    let metrics = oracle.score_with_reference(traj, &ep.ctx.scene, ep.reference_progress)?;
    Ok(SceneScore {
        scene_id: ep.scene_id,
        metrics,
        epdms: aggregate_epdms(&metrics, &ep.expert_metrics, weights),
    })
}

/// Scores any trajectory source over a set of episodes.
pub fn evaluate_with(
    episodes: &[Episode],
    oracle: &MetricOracle,
    weights: &EpdmsWeights,
    mut plan: impl FnMut(&Episode) -> Result<Trajectory>,
) -> Result<Vec<SceneScore>> {
    episodes
        .iter()
        .map(|ep| score_episode(ep, &plan(ep)?, oracle, weights))
        .collect()
}

/// Highest-scoring denoised trajectory per episode.
pub fn evaluate_policy(
    policy: &DiffusionPolicy,
    params: &ParamBundle,
    anchors: &AnchorSet,
    episodes: &[Episode],
    oracle: &MetricOracle,
    weights: &EpdmsWeights,
) -> Result<Vec<SceneScore>> {
    evaluate_with(episodes, oracle, weights, |ep| {
        policy.plan(params, &ep.ctx, anchors).map(|(_, t)| t)
    })
}

pub fn summarize(scores: &[SceneScore]) -> EvalSummary {
    let n = scores.len().max(1) as f64;
    let mean_metrics = Metric::LEARNED
        .iter()
        .map(|m| {
            let total: f64 = scores.iter().map(|s| s.metrics.get(*m).unwrap_or(0.0)).sum();
            (m.name().to_string(), total / n)
        })
        .collect();
    EvalSummary {
        scenes: scores.len(),
        mean_metrics,
        mean_epdms: scores.iter().map(|s| s.epdms).sum::<f64>() / n,
    }
}

pub fn mean_epdms(scores: &[SceneScore]) -> f64 {
    summarize(scores).mean_epdms
}
