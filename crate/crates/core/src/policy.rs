//! Anchored truncated diffusion planner.
//!
//! Trajectories are handled as flattened, normalized `[x, y, theta]` vectors.
//! Each anchor is denoised independently: the denoiser net sees the noisy
//! state, the clean anchor, a condition vector sampled from the feature grid
//! along the anchor, and the step index. It predicts a residual `x0` estimate
//! on top of the anchor; the transition mean is the standard posterior mean
//! given that estimate. A separate scorer net maps the condition to the
//! anchor's classification logit.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anchors::{assign, AnchorSet};
use crate::config::WorldConfig;
use crate::diffgraph::{adam_step, loss, Activation, AdamConfig, AdamState, ParamBundle, Tape};
use crate::geometry::wrap_angle;
use crate::raster::{channel_count, FeatureGrid};
use crate::scene::{Scene, Trajectory, Waypoint};
use crate::{Error, Result};

pub const DENOISER: &str = "denoiser";
pub const SCORER: &str = "scorer";
const BCE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub tau: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Lower bound on the per-step transition stddev (normalized units).
    pub sigma_min: f64,
    pub hidden: Vec<usize>,
    /// Degree of the polynomial time basis for the residual on top of the
    /// anchor; 0 lets every coordinate move independently.
    pub residual_degree: usize,
    pub score_hidden: Vec<usize>,
    /// Weight of the classification term in the imitation loss.
    pub bce_weight: f64,
    pub x_scale: f64,
    pub y_scale: f64,
    pub theta_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            tau: 8,
            beta_start: 1e-4,
            beta_end: 0.2,
            sigma_min: 0.05,
            hidden: vec![96, 96],
            residual_degree: 3,
            score_hidden: vec![64],
            bce_weight: 0.2,
            x_scale: 20.0,
            y_scale: 4.0,
            theta_scale: 0.5,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::config::check;
        check(self.tau >= 1, "policy.tau must be at least 1")?;
        check(
            self.beta_start > 0.0 && self.beta_end < 1.0 && self.beta_start <= self.beta_end,
            "policy betas must satisfy 0 < beta_start <= beta_end < 1",
        )?;
        check(self.sigma_min >= 0.0, "policy.sigma_min must be non-negative")?;
        check(!self.hidden.is_empty(), "policy.hidden must list at least one layer")?;
        check(self.bce_weight >= 0.0, "policy.bce_weight must be non-negative")?;
        check(
            self.x_scale > 0.0 && self.y_scale > 0.0 && self.theta_scale > 0.0,
            "policy scales must be positive",
        )
    }
}

/// Step-indexed schedule; index 0 is the clean state (`alpha_bar[0] = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub tau: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas; `sigma_t` is the posterior stddev floored at `sigma_min`.
    pub fn linear(tau: usize, beta_start: f64, beta_end: f64, sigma_min: f64) -> Self {
        let mut betas = vec![0.0];
        for t in 1..=tau {
            let f = if tau == 1 {
                0.0
            } else {
                (t - 1) as f64 / (tau - 1) as f64
            };
            betas.push(beta_start + (beta_end - beta_start) * f);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0];
        for t in 1..=tau {
            alpha_bars.push(alpha_bars[t - 1] * alphas[t]);
        }
        let mut s = Self {
            tau,
            betas,
            alphas,
            alpha_bars,
            sigmas: vec![0.0],
        };
        for t in 1..=tau {
            let var = s.betas[t] * s.one_minus_alpha_bar(t - 1) / s.one_minus_alpha_bar(t);
            s.sigmas.push(var.sqrt().max(sigma_min));
        }
        s
    }

    /// `1 - alpha_bar_t` summed as `sum_s alpha_bar_{s-1} beta_s`, which avoids
    /// cancellation when the betas are small.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1..=t).map(|s| self.alpha_bars[s - 1] * self.betas[s]).sum()
    }

    pub fn from_config(cfg: &PolicyConfig) -> Self {
        Self::linear(cfg.tau, cfg.beta_start, cfg.beta_end, cfg.sigma_min)
    }

    /// Same schedule with every transition made noiseless.
    pub fn noiseless(&self) -> Self {
        Self {
            sigmas: vec![0.0; self.tau + 1],
            ..self.clone()
        }
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean at step `t`.
    pub fn posterior_coefs(&self, t: usize) -> (f64, f64) {
        let ab_prev = self.alpha_bars[t - 1];
        let den = self.one_minus_alpha_bar(t);
        let c0 = ab_prev.sqrt() * self.betas[t] / den;
        let ct = self.alphas[t].sqrt() * self.one_minus_alpha_bar(t - 1) / den;
        (c0, ct)
    }

    pub fn is_valid(&self) -> bool {
        self.tau >= 1
            && self.betas[1..].iter().all(|b| *b > 0.0 && *b < 1.0)
            && self.sigmas[1..].iter().all(|s| *s > 0.0)
    }
}

/// Normalization between metric trajectories and network vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajCodec {
    pub x_scale: f64,
    pub y_scale: f64,
    pub theta_scale: f64,
}

impl TrajCodec {
    pub fn from_config(cfg: &PolicyConfig) -> Self {
        Self {
            x_scale: cfg.x_scale,
            y_scale: cfg.y_scale,
            theta_scale: cfg.theta_scale,
        }
    }

    pub fn encode(&self, traj: &Trajectory) -> Vec<f64> {
        traj.waypoints
            .iter()
            .flat_map(|w| [w.x / self.x_scale, w.y / self.y_scale, w.theta / self.theta_scale])
            .collect()
    }

    pub fn decode(&self, v: &[f64], dt: f64) -> Trajectory {
        Trajectory::new(
            v.chunks_exact(3)
                .map(|c| {
                    Waypoint::new(
                        c[0] * self.x_scale,
                        c[1] * self.y_scale,
                        wrap_angle(c[2] * self.theta_scale),
                    )
                })
                .collect(),
            dt,
        )
    }

    /// Per-coordinate scale, for converting normalized errors to metric units.
    pub fn scale_of(&self, i: usize) -> f64 {
        [self.x_scale, self.y_scale, self.theta_scale][i % 3]
    }
}

/// Conditioning for one anchor in one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    /// Normalized clean anchor.
    pub anchor: Vec<f64>,
    /// Grid samples at each anchor waypoint, ego speed and accel, the anchor's
    /// initial speed and accel mismatch, command one-hot.
    pub features: Vec<f64>,
}

impl Condition {
    pub fn build(scene: &Scene, grid: &FeatureGrid, anchor: &Trajectory, codec: &TrajCodec) -> Self {
        let c = grid.channels;
        let mut features = vec![0.0; anchor.len() * c + CONDITION_EXTRA];
        for (i, w) in anchor.waypoints.iter().enumerate() {
            grid.sample_into(w.point(), &mut features[i * c..(i + 1) * c]);
        }
        let n = anchor.len() * c;
        let ego = &scene.ego0;
        // Initial speed and acceleration implied by the anchor, against the ego state.
        let v1 = anchor.waypoints.first().map_or(ego.speed, |w| w.point().dist(ego.pose.point()) / anchor.dt);
        let a1 = (v1 - ego.speed) / anchor.dt;
        features[n] = ego.speed / 10.0;
        features[n + 1] = ego.accel / 3.0;
        features[n + 2] = (v1 - ego.speed) / 5.0;
        features[n + 3] = (a1 - ego.accel) / 5.0;
        features[n + 4..].copy_from_slice(&scene.command.one_hot());
        Self {
            anchor: codec.encode(anchor),
            features,
        }
    }

    /// Vector consumed by the critic.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.anchor.clone();
        v.extend_from_slice(&self.features);
        v
    }

    pub fn len(&self) -> usize {
        self.anchor.len() + self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const CONDITION_EXTRA: usize = 8;

pub fn condition_len(world: &WorldConfig) -> usize {
    3 * world.horizon + world.horizon * channel_count(world) + CONDITION_EXTRA
}

/// Output of one denoiser evaluation for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub x0: Vec<f64>,
    pub logit: f64,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub denoised: Vec<Trajectory>,
    pub scores: Vec<f64>,
}

impl PolicyOutput {
    /// Index of the highest score; ties go to the lowest index.
    pub fn best(&self) -> usize {
        let mut best = 0;
        for (i, s) in self.scores.iter().enumerate() {
            if *s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Recorded chain `x_tau, ..., x_0` with the transition mean for each step.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseChain {
    pub anchor_idx: usize,
    pub cond: Condition,
    /// `states[i]` is `x_{tau - i}`.
    pub states: Vec<Vec<f64>>,
    /// `means[i]` is the mean used to draw `states[i + 1]`.
    pub means: Vec<Vec<f64>>,
    /// Classification logit at the last step.
    pub final_logit: f64,
}

impl DenoiseChain {
    /// Step index `t` of transition `i` (`x_t -> x_{t-1}`).
    pub fn step_of(&self, i: usize) -> usize {
        self.states.len() - 1 - i
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn log_likelihood(&self, schedule: &NoiseSchedule) -> f64 {
        self.means
            .iter()
            .enumerate()
            .map(|(i, m)| transition_logprob(m, schedule.sigmas[self.step_of(i)], &self.states[i + 1]))
            .sum()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_u32::<LittleEndian>(self.anchor_idx as u32)?;
        w.write_f64::<LittleEndian>(self.final_logit)?;
        let vecs = [&self.cond.anchor, &self.cond.features];
        for v in vecs.into_iter().chain(&self.states).chain(&self.means) {
            w.write_u32::<LittleEndian>(v.len() as u32)?;
            for x in v {
                w.write_f64::<LittleEndian>(*x)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, tau: usize) -> Result<Self> {
        let anchor_idx = r.read_u32::<LittleEndian>()? as usize;
        let final_logit = r.read_f64::<LittleEndian>()?;
        let mut read_vec = || -> Result<Vec<f64>> {
            let n = r.read_u32::<LittleEndian>()? as usize;
            (0..n)
                .map(|_| Ok(r.read_f64::<LittleEndian>()?))
                .collect()
        };
        let anchor = read_vec()?;
        let features = read_vec()?;
        let states = (0..=tau).map(|_| read_vec()).collect::<Result<_>>()?;
        let means = (0..tau).map(|_| read_vec()).collect::<Result<_>>()?;
        Ok(Self {
            anchor_idx,
            cond: Condition { anchor, features },
            states,
            means,
            final_logit,
        })
    }
}

/// Exact diagonal-Gaussian log-density of `x` under `N(mean, sigma^2 I)`.
pub fn transition_logprob(mean: &[f64], sigma: f64, x: &[f64]) -> f64 {
    let d = mean.len() as f64;
    let sq: f64 = mean.iter().zip(x).map(|(m, v)| (v - m) * (v - m)).sum();
    -0.5 * sq / (sigma * sigma) - 0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
}

/// `x_t = sqrt(alpha_bar_t) a + sqrt(1 - alpha_bar_t) eps` for every anchor.
pub fn perturb_anchors(anchors: &[Vec<f64>], t: usize, schedule: &NoiseSchedule, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_with(anchors, t, schedule, &mut rng)
}

fn perturb_with(anchors: &[Vec<f64>], t: usize, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let (a, b) = (schedule.alpha_bars[t].sqrt(), schedule.one_minus_alpha_bar(t).sqrt());
    anchors
        .iter()
        .map(|v| {
            v.iter()
                .map(|x| a * x + b * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Imitation loss on already computed outputs, with gradients with respect to
/// every anchor's `x0` and logit.
pub struct ImitationTerms {
    pub loss: f64,
    pub l1: f64,
    pub bce: f64,
    pub grad_x0: Vec<f64>,
    pub grad_logits: Vec<f64>,
}

pub fn imitation_terms(x0_assigned: &[f64], logits: &[f64], gt: &[f64], assigned: usize, lambda: f64) -> ImitationTerms {
    let d = gt.len() as f64;
    let l1 = x0_assigned
        .iter()
        .zip(gt)
        .map(|(x, g)| (x - g).abs())
        .sum::<f64>()
        / d;
    let grad_x0 = x0_assigned
        .iter()
        .zip(gt)
        .map(|(x, g)| (x - g).signum() / d)
        .collect();
    let mut bce = 0.0;
    let mut grad_logits = Vec::with_capacity(logits.len());
    for (k, l) in logits.iter().enumerate() {
        let y = if k == assigned { 1.0 } else { 0.0 };
        let (v, g) = loss::bce_with_logit(*l, y, BCE_EPS);
        bce += v;
        grad_logits.push(lambda * g);
    }
    ImitationTerms {
        loss: l1 + lambda * bce,
        l1,
        bce,
        grad_x0,
        grad_logits,
    }
}

/// Scene plus its rasterized features.
#[derive(Debug, Clone)]
pub struct SceneContext {
    pub scene: Scene,
    pub grid: FeatureGrid,
}

impl SceneContext {
    pub fn new(scene: Scene, world: &WorldConfig) -> Self {
        let grid = crate::raster::rasterize(&scene, world);
        Self { scene, grid }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ImitationReport {
    pub loss: f64,
    pub l1: f64,
    pub bce: f64,
    /// Mean absolute position error in meters on the assigned anchor.
    pub l1_meters: f64,
    /// Fraction of samples whose highest score is the assigned anchor.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct DiffusionPolicy {
    pub cfg: PolicyConfig,
    pub world: WorldConfig,
    pub schedule: NoiseSchedule,
    pub codec: TrajCodec,
}

impl DiffusionPolicy {
    pub fn new(cfg: PolicyConfig, world: WorldConfig) -> Self {
        let schedule = NoiseSchedule::from_config(&cfg);
        let codec = TrajCodec::from_config(&cfg);
        Self {
            cfg,
            world,
            schedule,
            codec,
        }
    }

    pub fn traj_len(&self) -> usize {
        3 * self.world.horizon
    }

    /// Denoiser input: noisy state, condition, normalized step.
    pub fn input_len(&self) -> usize {
        self.traj_len() + condition_len(&self.world) + 1
    }

    /// Number of residual outputs of the denoiser.
    pub fn residual_len(&self) -> usize {
        match self.cfg.residual_degree {
            0 => self.traj_len(),
            d => 3 * d,
        }
    }

    /// Basis value for waypoint `k` and power `j` (1-based).
    fn basis(&self, k: usize, j: usize) -> f64 {
        ((k + 1) as f64 / self.world.horizon as f64).powi(j as i32)
    }

    /// Residual coefficients to a flattened trajectory offset.
    pub fn expand_residual(&self, o: &[f64]) -> Vec<f64> {
        let d = self.cfg.residual_degree;
        if d == 0 {
            return o.to_vec();
        }
        let mut out = vec![0.0; self.traj_len()];
        for k in 0..self.world.horizon {
            for c in 0..3 {
                out[3 * k + c] = (1..=d).map(|j| o[c * d + j - 1] * self.basis(k, j)).sum();
            }
        }
        out
    }

    fn residual_grad(&self, grad_x0: &[f64]) -> Vec<f64> {
        let d = self.cfg.residual_degree;
        if d == 0 {
            return grad_x0.to_vec();
        }
        let mut g = vec![0.0; 3 * d];
        for k in 0..self.world.horizon {
            for c in 0..3 {
                for j in 1..=d {
                    g[c * d + j - 1] += grad_x0[3 * k + c] * self.basis(k, j);
                }
            }
        }
        g
    }

    pub fn init_params(&self, seed: u64) -> ParamBundle {
        let mut rng = ParamBundle::rng(seed);
        let mut den = vec![self.input_len()];
        den.extend(&self.cfg.hidden);
        den.push(self.residual_len());
        let mut sc = vec![condition_len(&self.world)];
        sc.extend(&self.cfg.score_hidden);
        sc.push(1);
        ParamBundle::new(seed)
            .with_net(DENOISER, &den, Activation::Tanh, &mut rng)
            .with_net(SCORER, &sc, Activation::Tanh, &mut rng)
    }

    /// Zeroes both output layers: outputs start at the anchors with score 0.5.
    pub fn zero_head(params: &mut ParamBundle) {
        for name in [DENOISER, SCORER] {
            let last = params.net_mut(name).layers.last_mut().unwrap();
            last.weight.iter_mut().for_each(|w| *w = 0.0);
            last.bias.iter_mut().for_each(|w| *w = 0.0);
        }
    }

    pub fn condition(&self, ctx: &SceneContext, anchor: &Trajectory) -> Condition {
        Condition::build(&ctx.scene, &ctx.grid, anchor, &self.codec)
    }

    pub fn conditions(&self, ctx: &SceneContext, anchors: &AnchorSet) -> Vec<Condition> {
        anchors.anchors.iter().map(|a| self.condition(ctx, a)).collect()
    }

    fn input(&self, x_t: &[f64], cond: &Condition, t: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.input_len());
        v.extend_from_slice(x_t);
        v.extend_from_slice(&cond.anchor);
        v.extend_from_slice(&cond.features);
        v.push(t as f64 / self.schedule.tau as f64);
        v
    }

    fn split(&self, out: &[f64], logit: f64, x_t: &[f64], cond: &Condition, t: usize) -> StepOutput {
        let x0: Vec<f64> = self
            .expand_residual(out)
            .iter()
            .zip(&cond.anchor)
            .map(|(o, a)| a + o)
            .collect();
        let (c0, ct) = self.schedule.posterior_coefs(t);
        let mean = x0.iter().zip(x_t).map(|(x0, xt)| c0 * x0 + ct * xt).collect();
        StepOutput { x0, logit, mean }
    }

    fn check_state(&self, x_t: &[f64]) -> Result<()> {
        if x_t.len() != self.traj_len() {
            return Err(Error::ShapeMismatch {
                expected: self.traj_len(),
                got: x_t.len(),
            });
        }
        Ok(())
    }

    /// Classification logit of an anchor; depends on the condition only.
    pub fn score_logit(&self, params: &ParamBundle, cond: &Condition) -> Result<f64> {
        Ok(params.net(SCORER).predict(&cond.flat())?[0])
    }

    pub fn score_with_tape(&self, params: &ParamBundle, cond: &Condition) -> Result<(f64, Tape)> {
        let (out, tape) = params.net(SCORER).forward(&cond.flat())?;
        Ok((out[0], tape))
    }

    pub fn backward_score(&self, params: &ParamBundle, tape: &mut Tape, grad_logit: f64, grads: &mut ParamBundle) -> Result<()> {
        params
            .net(SCORER)
            .backward_into(tape, &[grad_logit], grads.net_mut(SCORER))?;
        Ok(())
    }

    fn step_inner(&self, params: &ParamBundle, x_t: &[f64], cond: &Condition, t: usize, logit: f64) -> Result<StepOutput> {
        self.check_state(x_t)?;
        let out = params.net(DENOISER).predict(&self.input(x_t, cond, t))?;
        Ok(self.split(&out, logit, x_t, cond, t))
    }

    /// Transition mean at step `t` without evaluating the scorer.
    pub fn transition_mean(&self, params: &ParamBundle, x_t: &[f64], cond: &Condition, t: usize) -> Result<Vec<f64>> {
        Ok(self.step_inner(params, x_t, cond, t, f64::NAN)?.mean)
    }

    pub fn step(&self, params: &ParamBundle, x_t: &[f64], cond: &Condition, t: usize) -> Result<StepOutput> {
        let logit = self.score_logit(params, cond)?;
        self.step_inner(params, x_t, cond, t, logit)
    }

    /// Denoiser evaluation with a tape; the returned logit is not recorded.
    pub fn step_with_tape(
        &self,
        params: &ParamBundle,
        x_t: &[f64],
        cond: &Condition,
        t: usize,
    ) -> Result<(StepOutput, Tape)> {
        self.check_state(x_t)?;
        let (out, tape) = params.net(DENOISER).forward(&self.input(x_t, cond, t))?;
        Ok((self.split(&out, f64::NAN, x_t, cond, t), tape))
    }

    /// Backpropagates a gradient with respect to `x0` through the denoiser.
    pub fn backward_step(&self, params: &ParamBundle, tape: &mut Tape, grad_x0: &[f64], grads: &mut ParamBundle) -> Result<()> {
        let g = self.residual_grad(grad_x0);
        params
            .net(DENOISER)
            .backward_into(tape, &g, grads.net_mut(DENOISER))?;
        Ok(())
    }

    /// Gradient of the transition mean with respect to `x0` at step `t`.
    pub fn mean_x0_coef(&self, t: usize) -> f64 {
        self.schedule.posterior_coefs(t).0
    }

    /// One network evaluation per anchor at step `t`.
    pub fn denoise(
        &self,
        params: &ParamBundle,
        noisy: &[Vec<f64>],
        t: usize,
        conds: &[Condition],
    ) -> Result<(PolicyOutput, Vec<Vec<f64>>)> {
        if noisy.len() != conds.len() {
            return Err(Error::ShapeMismatch {
                expected: conds.len(),
                got: noisy.len(),
            });
        }
        let mut denoised = Vec::with_capacity(noisy.len());
        let mut scores = Vec::with_capacity(noisy.len());
        let mut means = Vec::with_capacity(noisy.len());
        for (x, c) in noisy.iter().zip(conds) {
            let s = self.step(params, x, c, t)?;
            denoised.push(self.codec.decode(&s.x0, self.world.dt));
            scores.push(loss::sigmoid(s.logit));
            means.push(s.mean);
        }
        Ok((PolicyOutput { denoised, scores }, means))
    }

    /// Chain from the anchor noised to step `tau`. A noiseless schedule
    /// starts from `sqrt(alpha_bar_tau)` times the anchor and is deterministic.
    pub fn sample_chain(
        &self,
        params: &ParamBundle,
        schedule: &NoiseSchedule,
        anchor_idx: usize,
        cond: &Condition,
        seed: u64,
    ) -> Result<DenoiseChain> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_tau = if schedule.sigmas.iter().all(|s| *s == 0.0) {
            let k = schedule.alpha_bars[schedule.tau].sqrt();
            cond.anchor.iter().map(|a| k * a).collect()
        } else {
            perturb_with(std::slice::from_ref(&cond.anchor), schedule.tau, schedule, &mut rng)
                .pop()
                .unwrap()
        };
        self.run_chain(params, schedule, anchor_idx, cond, x_tau, &mut rng)
    }

    /// Noise-free chain of the policy's own schedule.
    pub fn mean_chain(&self, params: &ParamBundle, anchor_idx: usize, cond: &Condition) -> Result<DenoiseChain> {
        self.sample_chain(params, &self.schedule.noiseless(), anchor_idx, cond, 0)
    }

    fn run_chain(
        &self,
        params: &ParamBundle,
        schedule: &NoiseSchedule,
        anchor_idx: usize,
        cond: &Condition,
        x_tau: Vec<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DenoiseChain> {
        let logit = self.score_logit(params, cond)?;
        let mut states = vec![x_tau];
        let mut means = Vec::with_capacity(schedule.tau);
        for t in (1..=schedule.tau).rev() {
            let s = self.step_inner(params, states.last().unwrap(), cond, t, logit)?;
            let sigma = schedule.sigmas[t];
            let next = s
                .mean
                .iter()
                .map(|m| {
                    if sigma > 0.0 {
                        m + sigma * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        *m
                    }
                })
                .collect();
            means.push(s.mean);
            states.push(next);
        }
        Ok(DenoiseChain {
            anchor_idx,
            cond: cond.clone(),
            states,
            means,
            final_logit: logit,
        })
    }

    /// Fully denoises every anchor along its noise-free mean path.
    pub fn plan_all(&self, params: &ParamBundle, conds: &[Condition]) -> Result<PolicyOutput> {
        let mut denoised = Vec::with_capacity(conds.len());
        let mut scores = Vec::with_capacity(conds.len());
        for (k, c) in conds.iter().enumerate() {
            let chain = self.mean_chain(params, k, c)?;
            denoised.push(self.codec.decode(chain.final_state(), self.world.dt));
            scores.push(loss::sigmoid(chain.final_logit));
        }
        Ok(PolicyOutput { denoised, scores })
    }

    /// Index of the highest-scoring anchor; ties go to the lowest index.
    pub fn best_anchor(&self, params: &ParamBundle, conds: &[Condition]) -> Result<usize> {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, c) in conds.iter().enumerate() {
            let l = self.score_logit(params, c)?;
            if l > best.1 {
                best = (k, l);
            }
        }
        Ok(best.0)
    }

    /// Highest-scoring fully denoised trajectory. Scores do not depend on the
    /// noisy state, so only the winning anchor is denoised.
    pub fn plan(&self, params: &ParamBundle, ctx: &SceneContext, anchors: &AnchorSet) -> Result<(usize, Trajectory)> {
        let conds = self.conditions(ctx, anchors);
        let best = self.best_anchor(params, &conds)?;
        let chain = self.mean_chain(params, best, &conds[best])?;
        Ok((best, self.codec.decode(chain.final_state(), self.world.dt)))
    }

    /// Mean imitation loss over a batch; accumulates gradients into `grads`.
    /// Each sample draws one noise level and one noise vector per anchor.
    pub fn imitation_loss(
        &self,
        params: &ParamBundle,
        batch: &[(&SceneContext, &Trajectory)],
        anchors: &AnchorSet,
        lambda: f64,
        seed: u64,
        grads: Option<&mut ParamBundle>,
    ) -> Result<ImitationReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch.len() as f64;
        let anchor_vecs: Vec<Vec<f64>> = anchors.anchors.iter().map(|a| self.codec.encode(a)).collect();
        let mut report = ImitationReport::default();
        let mut grads = grads;
        for (ctx, gt) in batch {
            if gt.len() != self.world.horizon {
                return Err(Error::HorizonMismatch {
                    traj: gt.len(),
                    scene: self.world.horizon,
                });
            }
            let conds = self.conditions(ctx, anchors);
            let assigned = assign(gt, anchors);
            let t = rng.gen_range(1..=self.schedule.tau);
            let noisy = perturb_with(&anchor_vecs, t, &self.schedule, &mut rng);
            let mut score_tapes = Vec::with_capacity(conds.len());
            let mut logits = Vec::with_capacity(conds.len());
            for c in &conds {
                let (l, tape) = self.score_with_tape(params, c)?;
                logits.push(l);
                score_tapes.push(tape);
            }
            let (out, mut tape) = self.step_with_tape(params, &noisy[assigned], &conds[assigned], t)?;
            let gt_vec = self.codec.encode(gt);
            let terms = imitation_terms(&out.x0, &logits, &gt_vec, assigned, lambda);
            report.loss += terms.loss / n;
            report.l1 += terms.l1 / n;
            report.bce += terms.bce / n;
            let meters: f64 = out
                .x0
                .chunks_exact(3)
                .zip(gt_vec.chunks_exact(3))
                .map(|(a, b)| (a[0] - b[0]).abs() * self.codec.x_scale + (a[1] - b[1]).abs() * self.codec.y_scale)
                .sum::<f64>()
                / (2 * self.world.horizon) as f64;
            report.l1_meters += meters / n;
            let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
            if best == assigned {
                report.accuracy += 1.0 / n;
            }
            if let Some(g) = grads.as_deref_mut() {
                let gx: Vec<f64> = terms.grad_x0.iter().map(|v| v / n).collect();
                self.backward_step(params, &mut tape, &gx, g)?;
                for (k, mut st) in score_tapes.into_iter().enumerate() {
                    self.backward_score(params, &mut st, terms.grad_logits[k] / n, g)?;
                }
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImitationConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Fraction of training scenes held out for validation metrics.
    pub val_fraction: f64,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 32,
            lr: 2e-3,
            adam: AdamConfig {
                max_grad_norm: 1.0,
                ..AdamConfig::default()
            },
            val_fraction: 0.1,
        }
    }
}

impl ImitationConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::config::check;
        check(self.batch_size > 0, "pretrain.batch_size must be positive")?;
        check(self.lr > 0.0, "pretrain.lr must be positive")?;
        check(
            (0.0..1.0).contains(&self.val_fraction),
            "pretrain.val_fraction must lie in [0, 1)",
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationEpoch {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_l1_m: f64,
    pub val_accuracy: f64,
}

/// Supervised training on `(scene, demonstration)` pairs. Continues from the
/// optimizer state when one is given, so step counters stay monotone.
pub fn train_imitation(
    policy: &DiffusionPolicy,
    params: &mut ParamBundle,
    state: &mut AdamState,
    data: &[(&SceneContext, &Trajectory)],
    anchors: &AnchorSet,
    cfg: &ImitationConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&ImitationEpoch, &ParamBundle, &AdamState) -> Result<()>,
) -> Result<Vec<ImitationEpoch>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_val = ((data.len() as f64) * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(data.len() - 1);
    let (train, val) = data.split_at(data.len() - n_val);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let first_epoch = (state.step as usize).div_ceil(train.len().div_ceil(cfg.batch_size)) + 1;
    for epoch in first_epoch..first_epoch + cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| train[i]).collect();
            let mut grads = params.zeros_like();
            let rep = policy.imitation_loss(params, &batch, anchors, policy.cfg.bce_weight, rng.gen(), Some(&mut grads))?;
            if !rep.loss.is_finite() {
                return Err(Error::DivergenceDetected(format!("imitation loss at epoch {epoch}")));
            }
            train_loss += rep.loss * chunk.len() as f64 / train.len() as f64;
            adam_step(params, &grads, state, cfg.lr, &cfg.adam)?;
        }
        let v = if val.is_empty() {
            ImitationReport::default()
        } else {
            policy.imitation_loss(params, val, anchors, policy.cfg.bce_weight, seed ^ 0x7A1, None)?
        };
        let entry = ImitationEpoch {
            epoch,
            step: state.step,
            train_loss,
            val_loss: v.loss,
            val_l1_m: v.l1_meters,
            val_accuracy: v.accuracy,
        };
        on_epoch(&entry, params, state)?;
        log.push(entry);
    }
    Ok(log)
}

/// Mean absolute difference in meters between two trajectory sets' positions.
pub fn mean_position_gap(a: &[Trajectory], b: &[Trajectory]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (ta, tb) in a.iter().zip(b) {
        for (wa, wb) in ta.waypoints.iter().zip(&tb.waypoints) {
            total += (wa.x - wb.x).abs() + (wa.y - wb.y).abs();
            n += 2;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}
