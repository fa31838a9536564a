//! Learned reward: a shared trunk over trajectory features with one head per
//! sub-metric, trained against oracle labels.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EpdmsWeights, WorldConfig};
use crate::dataset::RewardSample;
use crate::diffgraph::{adam_step, loss, Activation, AdamConfig, AdamState, Mlp, ParamBundle};
use crate::oracle::{Kinematics, Metric, MetricVector};
use crate::policy::SceneContext;
use crate::raster::{channel_count, FeatureGrid};
use crate::scene::{Scene, Trajectory};
use crate::{Error, Result};

pub const TRUNK: &str = "trunk";
const BCE_EPS: f64 = 1e-6;
/// Sample points per waypoint: center, four corners, front bumper.
const POINTS_PER_WAYPOINT: usize = 6;
const KIN_PER_WAYPOINT: usize = 7;
const GLOBAL_FEATURES: usize = 10;

pub fn head_name(m: Metric) -> String {
    format!("head_{}", m.name().to_lowercase())
}

fn is_three_way(m: Metric) -> bool {
    matches!(m, Metric::Nc | Metric::Ddc)
}

fn class_of(v: f64) -> usize {
    ((v * 2.0).round() as usize).min(2)
}

pub fn metric_weight(w: &EpdmsWeights, m: Metric) -> f64 {
    match m {
        Metric::Nc => w.nc,
        Metric::Dac => w.dac,
        Metric::Ddc => w.ddc,
        Metric::Tlc => w.tlc,
        Metric::Ep => w.ep,
        Metric::Ttc => w.ttc,
        Metric::Lk => w.lk,
        Metric::Hc => w.hc,
        Metric::Ec => w.ec,
    }
}

pub fn grid_block_len(world: &WorldConfig) -> usize {
    POINTS_PER_WAYPOINT * channel_count(world)
}

pub fn feature_len(world: &WorldConfig) -> usize {
    world.horizon * (grid_block_len(world) + KIN_PER_WAYPOINT) + GLOBAL_FEATURES
}

/// Feature layout: per-waypoint grid blocks, then per-waypoint kinematics,
/// then scene-level scalars.
pub fn extract_traj_feature(scene: &Scene, grid: &FeatureGrid, traj: &Trajectory, world: &WorldConfig) -> Result<Vec<f64>> {
    if traj.len() != world.horizon {
        return Err(Error::HorizonMismatch {
            traj: traj.len(),
            scene: world.horizon,
        });
    }
    let c = grid.channels;
    let block = grid_block_len(world);
    let mut f = vec![0.0; feature_len(world)];
    for (k, w) in traj.waypoints.iter().enumerate() {
        let b = w.footprint(world.vehicle_length, world.vehicle_width);
        let mut pts = vec![b.center];
        pts.extend(b.corners());
        pts.push(b.front());
        for (j, p) in pts.iter().enumerate() {
            let o = k * block + j * c;
            grid.sample_into(*p, &mut f[o..o + c]);
        }
    }

    let kin = Kinematics::of(traj, scene);
    let line = &scene.centerline;
    let s0 = line.project(scene.ego0.pose.point()).s;
    let mut prev_s = s0;
    let mut reverse = 0.0;
    let step_len = world.v_max * world.dt;
    let base = world.horizon * block;
    for (k, w) in traj.waypoints.iter().enumerate() {
        let s = line.project(w.point()).s;
        let ds = s - prev_s;
        if ds < 0.0 {
            reverse -= ds;
        }
        prev_s = s;
        let o = base + k * KIN_PER_WAYPOINT;
        f[o..o + KIN_PER_WAYPOINT].copy_from_slice(&[
            w.x / 20.0,
            w.y / 4.0,
            w.theta / 0.5,
            kin.speeds[k] / 10.0,
            kin.accels[k] / 3.0,
            kin.jerks[k] / 5.0,
            ds / step_len,
        ]);
    }
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let g = base + world.horizon * KIN_PER_WAYPOINT;
    let progress = traj.waypoints.last().map_or(s0, |w| line.project(w.point()).s) - s0;
    f[g] = scene.ego0.speed / 10.0;
    f[g + 1] = scene.ego0.accel / 3.0;
    f[g + 2] = max_abs(&kin.accels) / 3.0;
    f[g + 3] = max_abs(&kin.jerks) / 5.0;
    f[g + 4] = reverse / 2.0;
    f[g + 5] = progress / 30.0;
    f[g + 6..g + 10].copy_from_slice(&scene.command.one_hot());
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RwmConfig {
    pub trunk_hidden: Vec<usize>,
    pub head_hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for RwmConfig {
    fn default() -> Self {
        Self {
            trunk_hidden: vec![64, 64],
            head_hidden: 16,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 40,
            patience: 10,
            val_fraction: 0.2,
            adam: AdamConfig::default(),
        }
    }
}

impl RwmConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::config::check;
        check(!self.trunk_hidden.is_empty(), "rwm.trunk_hidden must not be empty")?;
        check(self.head_hidden > 0, "rwm.head_hidden must be positive")?;
        check(self.lr > 0.0, "rwm.lr must be positive")?;
        check(self.batch_size > 0, "rwm.batch_size must be positive")?;
        check(
            self.val_fraction > 0.0 && self.val_fraction < 1.0,
            "rwm.val_fraction must lie in (0, 1)",
        )
    }
}

/// Predicted sub-scores in [`Metric::LEARNED`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricPrediction {
    pub values: [f64; 8],
    pub nc_probs: [f64; 3],
    pub ddc_probs: [f64; 3],
}

impl MetricPrediction {
    pub fn get(&self, m: Metric) -> f64 {
        let i = Metric::LEARNED.iter().position(|x| *x == m).expect("learned metric");
        self.values[i]
    }
}

/// Normalized weighted sum: an all-one prediction maps to exactly 1.
pub fn predict_epdms(pred: &MetricPrediction, weights: &EpdmsWeights) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, m) in Metric::LEARNED.iter().enumerate() {
        let w = metric_weight(weights, *m);
        num += w * pred.values[i];
        den += w;
    }
    num / den
}

#[derive(Debug, Clone)]
pub struct RewardModel {
    pub world: WorldConfig,
    pub weights: EpdmsWeights,
    pub cfg: RwmConfig,
}

fn expected3(p: &[f64]) -> f64 {
    0.5 * p[1] + p[2]
}

impl RewardModel {
    pub fn new(world: WorldConfig, weights: EpdmsWeights, cfg: RwmConfig) -> Self {
        Self { world, weights, cfg }
    }

    pub fn init_params(&self, seed: u64) -> ParamBundle {
        let mut rng = ParamBundle::rng(seed);
        let mut sizes = vec![feature_len(&self.world)];
        sizes.extend(&self.cfg.trunk_hidden);
        let trunk_out = *sizes.last().unwrap();
        let mut p = ParamBundle::new(seed).with_net(TRUNK, &sizes, Activation::Tanh, &mut rng);
        for m in Metric::LEARNED {
            let out = if is_three_way(m) { 3 } else { 1 };
            p = p.with_net(&head_name(m), &[trunk_out, self.cfg.head_hidden, out], Activation::Tanh, &mut rng);
        }
        p
    }

    pub fn feature(&self, ctx: &SceneContext, traj: &Trajectory) -> Result<Vec<f64>> {
        extract_traj_feature(&ctx.scene, &ctx.grid, traj, &self.world)
    }

    /// Raw head outputs (logits) for one feature vector.
    fn head_outputs(&self, params: &ParamBundle, f: &[f64]) -> Result<Vec<Vec<f64>>> {
        let h = params.net(TRUNK).predict(f)?;
        Metric::LEARNED
            .iter()
            .map(|m| params.net(&head_name(*m)).predict(&h))
            .collect()
    }

    pub fn predict_metrics(&self, params: &ParamBundle, f: &[f64]) -> Result<MetricPrediction> {
        let outs = self.head_outputs(params, f)?;
        Ok(prediction_from_outputs(&outs))
    }

    pub fn reward(&self, params: &ParamBundle, ctx: &SceneContext, traj: &Trajectory) -> Result<f64> {
        let f = self.feature(ctx, traj)?;
        Ok(predict_epdms(&self.predict_metrics(params, &f)?, &self.weights))
    }

    /// Mean weighted loss over a batch; accumulates gradients when given.
    pub fn rwm_loss(
        &self,
        params: &ParamBundle,
        batch: &[(&[f64], &MetricVector)],
        mut grads: Option<&mut ParamBundle>,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = batch.len() as f64;
        let wsum: f64 = Metric::LEARNED.iter().map(|m| metric_weight(&self.weights, *m)).sum();
        let trunk = params.net(TRUNK);
        let mut total = 0.0;
        for (f, target) in batch {
            let (h, mut ttape) = trunk.forward(f)?;
            let mut gh = vec![0.0; h.len()];
            for m in Metric::LEARNED {
                let name = head_name(m);
                let head = params.net(&name);
                let (out, mut htape) = head.forward(&h)?;
                let w = metric_weight(&self.weights, m) / wsum;
                let y = target.get(m).expect("learned metric present");
                let (l, g) = metric_loss(m, &out, y);
                total += w * l / n;
                if let Some(gr) = grads.as_deref_mut() {
                    let g: Vec<f64> = g.iter().map(|v| v * w / n).collect();
                    let gin = head.backward_into(&mut htape, &g, gr.net_mut(&name))?;
                    gh.iter_mut().zip(&gin).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gr) = grads.as_deref_mut() {
                trunk.backward_into(&mut ttape, &gh, gr.net_mut(TRUNK))?;
            }
        }
        Ok(total)
    }
}

pub fn prediction_from_outputs(outs: &[Vec<f64>]) -> MetricPrediction {
    let mut values = [0.0; 8];
    let mut nc_probs = [0.0; 3];
    let mut ddc_probs = [0.0; 3];
    for (i, m) in Metric::LEARNED.iter().enumerate() {
        if is_three_way(*m) {
            let p = loss::softmax(&outs[i]);
            values[i] = expected3(&p);
            let dst = if *m == Metric::Nc { &mut nc_probs } else { &mut ddc_probs };
            dst.copy_from_slice(&p);
        } else {
            values[i] = loss::sigmoid(outs[i][0]);
        }
    }
    MetricPrediction {
        values,
        nc_probs,
        ddc_probs,
    }
}

/// Per-metric loss and its gradient with respect to the head outputs:
/// cross-entropy for three-way metrics, squared error on the squashed EP,
/// clamped binary cross-entropy otherwise.
pub fn metric_loss(m: Metric, out: &[f64], target: f64) -> (f64, Vec<f64>) {
    if is_three_way(m) {
        loss::cross_entropy(out, class_of(target), BCE_EPS)
    } else if m == Metric::Ep {
        let p = loss::sigmoid(out[0]);
        let d = p - target;
        (d * d, vec![2.0 * d * p * (1.0 - p)])
    } else {
        let (l, g) = loss::bce_with_logit(out[0], target, BCE_EPS);
        (l, vec![g])
    }
}

/// Average ranks (ties share the mean rank), 1-based.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].partial_cmp(&v[*b]).unwrap());
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub metric: String,
    /// Accuracy for discrete metrics, mean absolute error for EP.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RwmReport {
    pub train_samples: usize,
    pub val_samples: usize,
    pub train_scenes: Vec<u64>,
    pub val_scenes: Vec<u64>,
    pub best_epoch: usize,
    pub val_loss: f64,
    pub metrics: Vec<MetricScore>,
    pub ep_mae: f64,
    pub spearman: f64,
    pub epochs: Vec<EpochLog>,
}

impl RwmReport {
    pub fn accuracy(&self, m: Metric) -> Option<f64> {
        self.metrics.iter().find(|s| s.metric == m.name()).map(|s| s.value)
    }

    /// Smallest accuracy among the discrete metrics.
    pub fn min_accuracy(&self) -> f64 {
        self.metrics
            .iter()
            .filter(|s| s.metric != "EP")
            .map(|s| s.value)
            .fold(1.0, f64::min)
    }
}

/// Validation statistics of `params` on feature/label pairs.
pub fn evaluate(
    model: &RewardModel,
    params: &ParamBundle,
    features: &[Vec<f64>],
    labels: &[(MetricVector, f64)],
) -> Result<(f64, Vec<MetricScore>, f64, f64)> {
    let mut correct = [0usize; 8];
    let mut ep_abs = 0.0;
    let mut pred_r = Vec::with_capacity(features.len());
    let mut true_r = Vec::with_capacity(features.len());
    for (f, (mv, epdms)) in features.iter().zip(labels) {
        let p = model.predict_metrics(params, f)?;
        for (i, m) in Metric::LEARNED.iter().enumerate() {
            let y = mv.get(*m).unwrap();
            match m {
                Metric::Ep => ep_abs += (p.values[i] - y).abs(),
                Metric::Nc | Metric::Ddc => {
                    let probs = if *m == Metric::Nc { p.nc_probs } else { p.ddc_probs };
                    let arg = (0..3).fold(0, |b, k| if probs[k] > probs[b] { k } else { b });
                    correct[i] += usize::from(arg == class_of(y));
                }
                _ => correct[i] += usize::from((p.values[i] >= 0.5) == (y >= 0.5)),
            }
        }
        pred_r.push(predict_epdms(&p, &model.weights));
        true_r.push(*epdms);
    }
    let n = features.len().max(1) as f64;
    let scores = Metric::LEARNED
        .iter()
        .enumerate()
        .map(|(i, m)| MetricScore {
            metric: m.name().to_string(),
            value: if *m == Metric::Ep {
                ep_abs / n
            } else {
                correct[i] as f64 / n
            },
        })
        .collect();
    let batch: Vec<(&[f64], &MetricVector)> = features.iter().map(Vec::as_slice).zip(labels.iter().map(|l| &l.0)).collect();
    let val_loss = if batch.is_empty() {
        0.0
    } else {
        model.rwm_loss(params, &batch, None)?
    };
    Ok((val_loss, scores, ep_abs / n, spearman(&pred_r, &true_r)))
}

/// Scene-disjoint split: returns `(train_ids, val_ids)`.
pub fn split_scenes(samples: &[RewardSample], val_fraction: f64, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let ids: BTreeSet<u64> = samples.iter().map(|s| s.scene_id).collect();
    let mut ids: Vec<u64> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if ids.len() < 2 {
        0
    } else {
        ((ids.len() as f64 * val_fraction).round() as usize).clamp(1, ids.len() - 1)
    };
    let val = ids.split_off(ids.len() - n_val);
    (ids, val)
}

/// Trains with early stopping on validation loss and returns the best parameters.
pub fn train_rwm(
    model: &RewardModel,
    samples: &[RewardSample],
    contexts: &HashMap<u64, SceneContext>,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ParamBundle, RwmReport)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = &model.cfg;
    let (train_ids, val_ids) = split_scenes(samples, cfg.val_fraction, seed);
    let val_set: BTreeSet<u64> = val_ids.iter().copied().collect();
    let mut tr_f = Vec::new();
    let mut tr_y = Vec::new();
    let mut va_f = Vec::new();
    let mut va_y = Vec::new();
    for s in samples {
        let ctx = contexts
            .get(&s.scene_id)
            .ok_or_else(|| Error::InvalidConfig(format!("reward sample references unknown scene {}", s.scene_id)))?;
        let f = model.feature(ctx, &s.trajectory)?;
        if val_set.contains(&s.scene_id) {
            va_f.push(f);
            va_y.push((s.metrics, s.epdms));
        } else {
            tr_f.push(f);
            tr_y.push((s.metrics, s.epdms));
        }
    }
    if tr_f.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut params = model.init_params(seed);
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157);
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..tr_f.len()).collect();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], &MetricVector)> = chunk.iter().map(|&i| (tr_f[i].as_slice(), &tr_y[i].0)).collect();
            let mut grads = params.zeros_like();
            let l = model.rwm_loss(&params, &batch, Some(&mut grads))?;
            if !l.is_finite() {
                return Err(Error::DivergenceDetected(format!("reward model loss at epoch {epoch}")));
            }
            train_loss += l * chunk.len() as f64 / tr_f.len() as f64;
            adam_step(&mut params, &grads, &mut state, cfg.lr, &cfg.adam)?;
        }
        let (val_loss, ..) = if va_f.is_empty() {
            (train_loss, Vec::new(), 0.0, 0.0)
        } else {
            evaluate(model, &params, &va_f, &va_y)?
        };
        let log = EpochLog {
            epoch,
            train_loss,
            val_loss,
        };
        on_epoch(&log);
        epochs.push(log);
        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (_, params, best_epoch) = best;
    let (val_loss, metrics, ep_mae, rho) = evaluate(model, &params, &va_f, &va_y)?;
    Ok((
        params,
        RwmReport {
            train_samples: tr_f.len(),
            val_samples: va_f.len(),
            train_scenes: train_ids,
            val_scenes: val_ids,
            best_epoch,
            val_loss,
            metrics,
            ep_mae,
            spearman: rho,
            epochs,
        },
    ))
}

/// Trunk network of a reward-model bundle.
pub fn trunk_of(params: &ParamBundle) -> &Mlp {
    params.net(TRUNK)
}
