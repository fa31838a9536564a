//! PPO fine-tuning of the diffusion policy against the learned reward model.
//!
//! The denoising chain is the decision process: states are `(x_t, c)`,
//! actions are `x_{t-1}` and the only reward is the reward model's EPDMS
//! estimate of the final trajectory. Transition `i` (leaving `x_{tau - i}`)
//! carries the weight `gamma^i`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, WeightedIndex};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::config::EpdmsWeights;
use crate::dataset::{mix, Episode};
use crate::diffgraph::{adam_step, loss, Activation, AdamConfig, AdamState, ParamBundle};
use crate::eval::{evaluate_policy, mean_epdms};
use crate::oracle::MetricOracle;
use crate::policy::{condition_len, Condition, DenoiseChain, DiffusionPolicy, NoiseSchedule};
use crate::rwm::RewardModel;
use crate::{Error, Result};

pub const CRITIC: &str = "critic";

/// Policy the importance ratio is taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioReference {
    /// The frozen pre-RL policy, which is also the KL anchor.
    Frozen,
    /// The parameters that collected the current batch.
    #[default]
    Behavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Optimization epochs over each collected batch.
    pub epochs: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub w_il: f64,
    pub kl_coef: f64,
    /// Chains sampled per scene.
    pub group_size: usize,
    pub scenes_per_iter: usize,
    pub iterations: usize,
    /// Chains per gradient step.
    pub minibatch: usize,
    /// Demonstrations per gradient step for the imitation term.
    pub il_batch: usize,
    /// Upper bound on the final mean KL to the reference.
    pub kl_bound: f64,
    pub checkpoint_every: usize,
    pub ratio_reference: RatioReference,
    /// Draw each chain's anchor from the scorer softmax and treat the draw as
    /// the first decision; otherwise every chain uses the top-scored anchor.
    pub sample_anchor: bool,
    pub critic_hidden: Vec<usize>,
    pub adam: AdamConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            lr: 1e-3,
            critic_lr: 1e-3,
            w_il: 0.5,
            kl_coef: 0.1,
            group_size: 16,
            scenes_per_iter: 16,
            iterations: 50,
            minibatch: 32,
            il_batch: 16,
            kl_bound: 5.0,
            checkpoint_every: 10,
            ratio_reference: RatioReference::Behavior,
            sample_anchor: true,
            critic_hidden: vec![64],
            adam: AdamConfig {
                max_grad_norm: 1.0,
                ..AdamConfig::default()
            },
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::config::check;
        check(self.clip_eps > 0.0 && self.clip_eps < 1.0, "rl.clip_eps must lie in (0, 1)")?;
        check(self.gamma > 0.0 && self.gamma <= 1.0, "rl.gamma must lie in (0, 1]")?;
        check((0.0..=1.0).contains(&self.gae_lambda), "rl.gae_lambda must lie in [0, 1]")?;
        check(self.w_il >= 0.0, "rl.w_il must be non-negative")?;
        check(self.kl_coef >= 0.0, "rl.kl_coef must be non-negative")?;
        check(self.lr > 0.0 && self.critic_lr > 0.0, "rl learning rates must be positive")?;
        check(self.group_size > 0, "rl.group_size must be positive")?;
        check(self.scenes_per_iter > 0, "rl.scenes_per_iter must be positive")?;
        check(self.minibatch > 0, "rl.minibatch must be positive")?;
        check(self.kl_bound > 0.0, "rl.kl_bound must be positive")
    }
}

pub fn init_critic(policy: &DiffusionPolicy, hidden: &[usize], seed: u64) -> ParamBundle {
    let mut rng = ParamBundle::rng(seed);
    let mut sizes = vec![condition_len(&policy.world)];
    sizes.extend(hidden);
    sizes.push(1);
    ParamBundle::new(seed).with_net(CRITIC, &sizes, Activation::Tanh, &mut rng)
}

pub fn critic_value(critic: &ParamBundle, cond: &Condition) -> Result<f64> {
    Ok(critic.net(CRITIC).predict(&cond.flat())?[0])
}

#[derive(Debug, Clone)]
pub struct ChainSample {
    pub chain: DenoiseChain,
    /// Reward-model EPDMS of the decoded final state.
    pub reward: f64,
    /// Critic value of the chain's condition at collection time.
    pub value: f64,
    /// Per-step means of the frozen reference policy along the chain.
    pub ref_means: Vec<Vec<f64>>,
}

/// Chains sampled for one scene. The critic baseline is evaluated on the
/// top-scored anchor's condition and shared by the group.
#[derive(Debug, Clone)]
pub struct Group {
    pub scene_id: u64,
    /// Condition of every anchor in the vocabulary.
    pub conds: Vec<Condition>,
    /// Scorer logits of the frozen reference and of the collecting policy.
    pub ref_logits: Vec<f64>,
    pub behavior_logits: Vec<f64>,
    /// Anchor whose condition feeds the critic.
    pub critic_anchor: usize,
    pub samples: Vec<ChainSample>,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub groups: Vec<Group>,
}

impl RolloutBatch {
    pub fn chains(&self) -> impl Iterator<Item = &ChainSample> {
        self.groups.iter().flat_map(|g| &g.samples)
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEstimate {
    pub returns: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
}

pub struct RolloutModels<'a> {
    pub policy: &'a DiffusionPolicy,
    pub params: &'a ParamBundle,
    pub reference: &'a ParamBundle,
    pub critic: &'a ParamBundle,
    pub rwm: &'a RewardModel,
    pub rwm_params: &'a ParamBundle,
    pub anchors: &'a AnchorSet,
}

/// Reference-policy means at every state of a chain.
pub fn reference_means(policy: &DiffusionPolicy, reference: &ParamBundle, chain: &DenoiseChain) -> Result<Vec<Vec<f64>>> {
    (0..chain.means.len())
        .map(|i| policy.transition_mean(reference, &chain.states[i], &chain.cond, chain.step_of(i)))
        .collect()
}

/// Samples `group_size` chains per scene. With `sample_anchor` each chain's
/// anchor is drawn from the softmax of the scorer logits; otherwise every
/// chain starts from the top-scored anchor.
pub fn collect_rollouts(
    m: &RolloutModels,
    episodes: &[&Episode],
    group_size: usize,
    sample_anchor: bool,
    seed: u64,
) -> Result<RolloutBatch> {
    let p = m.policy;
    let mut groups = Vec::with_capacity(episodes.len());
    for (gi, ep) in episodes.iter().enumerate() {
        let conds = p.conditions(&ep.ctx, m.anchors);
        let behavior_logits = conds.iter().map(|c| p.score_logit(m.params, c)).collect::<Result<Vec<_>>>()?;
        let ref_logits = conds.iter().map(|c| p.score_logit(m.reference, c)).collect::<Result<Vec<_>>>()?;
        let best = p.best_anchor(m.params, &conds)?;
        let value = critic_value(m.critic, &conds[best])?;
        let probs = loss::softmax(&behavior_logits);
        let pick = WeightedIndex::new(&probs).map_err(|e| Error::DivergenceDetected(format!("anchor distribution: {e}")))?;
        let mut samples = Vec::with_capacity(group_size);
        for j in 0..group_size {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, (gi * group_size + j) as u64));
            let k = if sample_anchor { pick.sample(&mut rng) } else { best };
            let chain = p.sample_chain(m.params, &p.schedule, k, &conds[k], rng.gen())?;
            let traj = p.codec.decode(chain.final_state(), p.world.dt);
            let reward = m.rwm.reward(m.rwm_params, &ep.ctx, &traj)?;
            let ref_means = reference_means(p, m.reference, &chain)?;
            samples.push(ChainSample {
                chain,
                reward,
                value,
                ref_means,
            });
        }
        groups.push(Group {
            scene_id: ep.scene_id,
            conds,
            ref_logits,
            behavior_logits,
            critic_anchor: best,
            samples,
        });
    }
    Ok(RolloutBatch { groups })
}

/// GAE over a chain of `steps` transitions with a terminal reward and a
/// constant value baseline; returns advantage plus value at the first state.
pub fn gae_return(reward: f64, value: f64, steps: usize, gamma: f64, lambda: f64) -> f64 {
    let mut adv = 0.0;
    for i in (0..steps).rev() {
        let (r, next) = if i + 1 == steps { (reward, 0.0) } else { (0.0, value) };
        let delta = r + gamma * next - value;
        adv = delta + gamma * lambda * adv;
    }
    adv + value
}

/// Standardizes to zero mean and unit population variance. Groups of one or
/// with no spread get all-zero advantages.
pub fn group_standardize(returns: &[f64]) -> Vec<f64> {
    let n = returns.len() as f64;
    if returns.len() < 2 {
        return vec![0.0; returns.len()];
    }
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 1e-12 * (1.0 + mean.abs()) {
        return vec![0.0; returns.len()];
    }
    returns.iter().map(|r| (r - mean) / sd).collect()
}

pub fn estimate_advantages(batch: &RolloutBatch, steps: usize, cfg: &PpoConfig) -> AdvantageEstimate {
    let returns: Vec<Vec<f64>> = batch
        .groups
        .iter()
        .map(|g| {
            g.samples
                .iter()
                .map(|s| gae_return(s.reward, s.value, steps, cfg.gamma, cfg.gae_lambda))
                .collect()
        })
        .collect();
    let advantages = returns.iter().map(|r| group_standardize(r)).collect();
    AdvantageEstimate { returns, advantages }
}

/// Clipped surrogate with a floor of `(1 + eps) * adv` for negative
/// advantages. Returns the objective and its derivative in the ratio.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    if adv == 0.0 {
        return (0.0, 0.0);
    }
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    let (mut v, mut d) = if ratio * adv <= clipped * adv {
        (ratio * adv, adv)
    } else {
        (clipped * adv, 0.0)
    };
    if adv < 0.0 && v < (1.0 + eps) * adv {
        v = (1.0 + eps) * adv;
        d = 0.0;
    }
    (v, d)
}

/// `log N(x; mu_p, sigma) - log N(x; mu_q, sigma)` without forming either density.
pub fn gaussian_log_ratio(mu_p: &[f64], mu_q: &[f64], sigma: f64, x: &[f64]) -> f64 {
    mu_p.iter()
        .zip(mu_q)
        .zip(x)
        .map(|((p, q), v)| (p - q) * (2.0 * v - p - q))
        .sum::<f64>()
        / (2.0 * sigma * sigma)
}

/// KL between isotropic Gaussians sharing `sigma`.
pub fn gaussian_kl(mu_p: &[f64], mu_q: &[f64], sigma: f64) -> f64 {
    mu_p.iter().zip(mu_q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * sigma * sigma)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PolicyLoss {
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

/// One chain with its group and advantage.
#[derive(Debug, Clone, Copy)]
pub struct PpoItem<'a> {
    pub group: &'a Group,
    pub sample: &'a ChainSample,
    pub advantage: f64,
}

/// Categorical KL between softmax distributions given by logits.
pub fn categorical_kl(logits_p: &[f64], logits_q: &[f64]) -> f64 {
    let (p, q) = (loss::softmax(logits_p), loss::softmax(logits_q));
    p.iter()
        .zip(&q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.ln()))
        .sum()
}

/// `-surrogate + kl_coef * KL`, averaged over decisions and chains. The
/// decisions are the anchor draw (when `cfg.sample_anchor`) followed by the
/// denoise transitions; transition `i` is weighted by `gamma^i`.
pub fn ppo_policy_loss(
    policy: &DiffusionPolicy,
    params: &ParamBundle,
    schedule: &NoiseSchedule,
    items: &[PpoItem],
    cfg: &PpoConfig,
    mut grads: Option<&mut ParamBundle>,
) -> Result<PolicyLoss> {
    let mut out = PolicyLoss::default();
    let per_chain = |it: &PpoItem| it.sample.chain.means.len() + usize::from(cfg.sample_anchor);
    let steps: usize = items.iter().map(per_chain).sum();
    if steps == 0 {
        return Ok(out);
    }
    let n = steps as f64;
    for it in items {
        let (sample, adv) = (it.sample, it.advantage);
        let chain = &sample.chain;
        if cfg.sample_anchor {
            let k = chain.anchor_idx;
            let mut logits = Vec::with_capacity(it.group.conds.len());
            let mut tapes = Vec::with_capacity(it.group.conds.len());
            for c in &it.group.conds {
                let (l, tape) = policy.score_with_tape(params, c)?;
                logits.push(l);
                tapes.push(tape);
            }
            let old_logits = match cfg.ratio_reference {
                RatioReference::Frozen => &it.group.ref_logits,
                RatioReference::Behavior => &it.group.behavior_logits,
            };
            let probs = loss::softmax(&logits);
            let ref_probs = loss::softmax(&it.group.ref_logits);
            let ratio = probs[k] / loss::softmax(old_logits)[k];
            let (s, ds) = clipped_surrogate(ratio, adv, cfg.clip_eps);
            let kl = categorical_kl(&logits, &it.group.ref_logits);
            out.surrogate += s / n;
            out.kl += kl / n;
            if ds == 0.0 && adv != 0.0 {
                out.clip_fraction += 1.0 / n;
            }
            if let Some(g) = grads.as_deref_mut() {
                for (j, mut tape) in tapes.into_iter().enumerate() {
                    let dlogp = f64::from(u8::from(j == k)) - probs[j];
                    let dkl = if probs[j] > 0.0 {
                        probs[j] * (probs[j].ln() - ref_probs[j].ln() - kl)
                    } else {
                        0.0
                    };
                    let gl = (-ds * ratio * dlogp + cfg.kl_coef * dkl) / n;
                    policy.backward_score(params, &mut tape, gl, g)?;
                }
            }
        }
        for i in 0..chain.means.len() {
            let t = chain.step_of(i);
            let sigma = schedule.sigmas[t];
            if sigma <= 0.0 {
                return Err(Error::InvalidConfig("PPO needs a stochastic schedule".into()));
            }
            let next = &chain.states[i + 1];
            let old = match cfg.ratio_reference {
                RatioReference::Frozen => &sample.ref_means[i],
                RatioReference::Behavior => &chain.means[i],
            };
            let (step, mut tape) = policy.step_with_tape(params, &chain.states[i], &chain.cond, t)?;
            let mu = &step.mean;
            let log_ratio = gaussian_log_ratio(mu, old, sigma, next);
            let ratio = log_ratio.min(50.0).exp();
            let w = cfg.gamma.powi(i as i32);
            let (s, ds) = clipped_surrogate(ratio, adv, cfg.clip_eps);
            let kl = gaussian_kl(mu, &sample.ref_means[i], sigma);
            out.surrogate += w * s / n;
            out.kl += kl / n;
            if ds == 0.0 && adv != 0.0 {
                out.clip_fraction += 1.0 / n;
            }
            if let Some(g) = grads.as_deref_mut() {
                let c0 = policy.mean_x0_coef(t);
                let s2 = sigma * sigma;
                let gx: Vec<f64> = (0..mu.len())
                    .map(|d| {
                        let g_surr = -w * ds * ratio * (next[d] - mu[d]) / s2;
                        let g_kl = cfg.kl_coef * (mu[d] - sample.ref_means[i][d]) / s2;
                        c0 * (g_surr + g_kl) / n
                    })
                    .collect();
                policy.backward_step(params, &mut tape, &gx, g)?;
            }
        }
    }
    out.loss = -out.surrogate + cfg.kl_coef * out.kl;
    Ok(out)
}

/// Mean squared error between critic values and returns.
pub fn value_loss(critic: &ParamBundle, items: &[(&Condition, f64)], mut grads: Option<&mut ParamBundle>) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let n = items.len() as f64;
    let net = critic.net(CRITIC);
    let mut total = 0.0;
    for (cond, ret) in items {
        let (v, mut tape) = net.forward(&cond.flat())?;
        let e = v[0] - ret;
        total += e * e / n;
        if let Some(g) = grads.as_deref_mut() {
            net.backward_into(&mut tape, &[2.0 * e / n], g.net_mut(CRITIC))?;
        }
    }
    Ok(total)
}

/// Everything that stays fixed during fine-tuning.
pub struct RlSetup<'a> {
    pub policy: &'a DiffusionPolicy,
    pub reference: &'a ParamBundle,
    pub rwm: &'a RewardModel,
    pub rwm_params: &'a ParamBundle,
    pub anchors: &'a AnchorSet,
    /// Scenes rollouts are collected on.
    pub rollout: &'a [Episode],
    /// Demonstrations for the imitation term.
    pub train: &'a [Episode],
    pub probe: &'a [Episode],
    pub oracle: &'a MetricOracle,
    pub weights: &'a EpdmsWeights,
}

#[derive(Debug, Clone)]
pub struct RlState {
    pub params: ParamBundle,
    pub optimizer: AdamState,
    pub critic: ParamBundle,
    pub critic_optimizer: AdamState,
    /// Completed iterations.
    pub iteration: usize,
}

impl RlState {
    pub fn new(params: ParamBundle, critic: ParamBundle) -> Self {
        let optimizer = AdamState::new(&params);
        let critic_optimizer = AdamState::new(&critic);
        Self {
            params,
            optimizer,
            critic,
            critic_optimizer,
            iteration: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub step: u64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub probe_epdms: f64,
    pub kl: f64,
    pub policy_loss: f64,
    pub surrogate: f64,
    pub il_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
}

impl IterationLog {
    pub const CSV_HEADER: &'static str =
        "iteration,step,reward_mean,reward_std,probe_epdms,kl,policy_loss,surrogate,il_loss,value_loss,clip_fraction";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.step,
            self.reward_mean,
            self.reward_std,
            self.probe_epdms,
            self.kl,
            self.policy_loss,
            self.surrogate,
            self.il_loss,
            self.value_loss,
            self.clip_fraction
        )
    }
}

pub enum RlEvent<'a> {
    Iteration(&'a IterationLog),
    /// A non-finite loss was seen; the state is the last finite one.
    Diverged(&'a str),
}

fn finite_or_abort(
    v: f64,
    what: &str,
    state: &RlState,
    on_event: &mut impl FnMut(RlEvent, &RlState) -> Result<()>,
) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    let msg = format!("{what} is not finite at iteration {}", state.iteration + 1);
    on_event(RlEvent::Diverged(&msg), state)?;
    Err(Error::DivergenceDetected(msg))
}

/// Runs iterations `state.iteration + 1 ..= cfg.iterations`. Each iteration's
/// randomness derives from `(seed, iteration)`, so resumed runs match.
pub fn train_rl(
    setup: &RlSetup,
    state: &mut RlState,
    cfg: &PpoConfig,
    seed: u64,
    mut on_event: impl FnMut(RlEvent, &RlState) -> Result<()>,
) -> Result<Vec<IterationLog>> {
    cfg.validate()?;
    if setup.rollout.is_empty() || setup.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = setup.policy;
    let steps = p.schedule.tau + usize::from(cfg.sample_anchor);
    let mut logs = Vec::new();
    while state.iteration < cfg.iterations {
        let it = state.iteration + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, it as u64));
        let scenes: Vec<&Episode> = setup
            .rollout
            .choose_multiple(&mut rng, cfg.scenes_per_iter.min(setup.rollout.len()))
            .collect();
        let models = RolloutModels {
            policy: p,
            params: &state.params,
            reference: setup.reference,
            critic: &state.critic,
            rwm: setup.rwm,
            rwm_params: setup.rwm_params,
            anchors: setup.anchors,
        };
        let batch = collect_rollouts(&models, &scenes, cfg.group_size, cfg.sample_anchor, rng.gen())?;
        let rewards: Vec<f64> = batch.chains().map(|s| s.reward).collect();
        let reward_mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let reward_std = (rewards.iter().map(|r| (r - reward_mean).powi(2)).sum::<f64>() / rewards.len() as f64).sqrt();
        finite_or_abort(reward_mean, "reward", state, &mut on_event)?;
        let est = estimate_advantages(&batch, steps, cfg);
        let (advs, rets) = (&est.advantages, &est.returns);
        let flat: Vec<(PpoItem, f64)> = batch
            .groups
            .iter()
            .enumerate()
            .flat_map(|(g, group)| {
                group.samples.iter().enumerate().map(move |(j, sample)| {
                    let item = PpoItem {
                        group,
                        sample,
                        advantage: advs[g][j],
                    };
                    (item, rets[g][j])
                })
            })
            .collect();

        let mut order: Vec<usize> = (0..flat.len()).collect();
        let (mut policy_loss, mut surrogate, mut il_loss, mut v_loss) = (0.0, 0.0, 0.0, 0.0);
        let mut updates = 0usize;
        let mut clip = 0.0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.minibatch) {
                let items: Vec<PpoItem> = chunk.iter().map(|&k| flat[k].0).collect();
                let mut grads = state.params.zeros_like();
                let pl = ppo_policy_loss(p, &state.params, &p.schedule, &items, cfg, Some(&mut grads))?;
                finite_or_abort(pl.loss, "policy loss", state, &mut on_event)?;
                let mut il = 0.0;
                if cfg.w_il > 0.0 && cfg.il_batch > 0 {
                    let demos: Vec<_> = setup
                        .train
                        .choose_multiple(&mut rng, cfg.il_batch.min(setup.train.len()))
                        .map(|e| (&e.ctx, &e.expert))
                        .collect();
                    let mut il_grads = state.params.zeros_like();
                    il = p
                        .imitation_loss(&state.params, &demos, setup.anchors, p.cfg.bce_weight, rng.gen(), Some(&mut il_grads))?
                        .loss;
                    finite_or_abort(il, "imitation loss", state, &mut on_event)?;
                    grads.add_scaled(&il_grads, cfg.w_il)?;
                }
                let vitems: Vec<(&Condition, f64)> = chunk
                    .iter()
                    .map(|&k| {
                        let g = flat[k].0.group;
                        (&g.conds[g.critic_anchor], flat[k].1)
                    })
                    .collect();
                let mut cgrads = state.critic.zeros_like();
                let vl = value_loss(&state.critic, &vitems, Some(&mut cgrads))?;
                finite_or_abort(vl, "value loss", state, &mut on_event)?;
                adam_step(&mut state.params, &grads, &mut state.optimizer, cfg.lr, &cfg.adam)?;
                adam_step(&mut state.critic, &cgrads, &mut state.critic_optimizer, cfg.critic_lr, &cfg.adam)?;
                policy_loss += pl.loss + cfg.w_il * il;
                surrogate += pl.surrogate;
                clip += pl.clip_fraction;
                il_loss += il;
                v_loss += vl;
                updates += 1;
            }
        }
        let u = updates.max(1) as f64;
        let all: Vec<PpoItem> = flat.iter().map(|f| f.0).collect();
        let kl = ppo_policy_loss(p, &state.params, &p.schedule, &all, cfg, None)?.kl;
        if !state.params.all_finite() || !state.critic.all_finite() {
            finite_or_abort(f64::NAN, "parameters", state, &mut on_event)?;
        }
        state.iteration = it;
        let probe_epdms = if setup.probe.is_empty() {
            f64::NAN
        } else {
            mean_epdms(&evaluate_policy(p, &state.params, setup.anchors, setup.probe, setup.oracle, setup.weights)?)
        };
        let log = IterationLog {
            iteration: it,
            step: state.optimizer.step,
            reward_mean,
            reward_std,
            probe_epdms,
            kl,
            policy_loss: policy_loss / u,
            surrogate: surrogate / u,
            il_loss: il_loss / u,
            value_loss: v_loss / u,
            clip_fraction: clip / u,
        };
        on_event(RlEvent::Iteration(&log), state)?;
        logs.push(log);
    }
    Ok(logs)
}
