mod support;

use deskdrive_core::anchors::{kmeans_fit, AnchorSet};
use deskdrive_core::config::EpdmsWeights;
use deskdrive_core::dataset::{build_scenes, DataConfig, Episode, Split};
use deskdrive_core::diffgraph::ParamBundle;
use deskdrive_core::oracle::MetricOracle;
use deskdrive_core::policy::{mean_position_gap, transition_logprob, DiffusionPolicy, PolicyConfig};
use deskdrive_core::rl::*;
use deskdrive_core::rwm::{RewardModel, RwmConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Fixture {
    oracle: MetricOracle,
    policy: DiffusionPolicy,
    params: ParamBundle,
    critic: ParamBundle,
    rwm: RewardModel,
    rwm_params: ParamBundle,
    anchors: AnchorSet,
    episodes: Vec<Episode>,
}

fn fixture(tau: usize, scenes: usize) -> Fixture {
    let oracle = MetricOracle::default();
    let policy = DiffusionPolicy::new(PolicyConfig { tau, ..PolicyConfig::default() }, oracle.world.clone());
    let data = DataConfig {
        train_scenes: scenes,
        ..DataConfig::default()
    };
    let recs = build_scenes(4, Split::Rl, scenes.max(4), &data, &oracle);
    let demos: Vec<_> = recs.iter().map(|r| r.expert.clone()).collect();
    let anchors = kmeans_fit(&demos, 4, 1).unwrap();
    let rwm = RewardModel::new(oracle.world.clone(), EpdmsWeights::default(), RwmConfig::default());
    Fixture {
        params: policy.init_params(1),
        critic: init_critic(&policy, &[16], 2),
        rwm_params: rwm.init_params(3),
        episodes: recs.iter().map(|r| Episode::from_record(r, &oracle.world)).collect(),
        oracle,
        policy,
        rwm,
        anchors,
    }
}

fn jitter(p: &ParamBundle, scale: f64, seed: u64) -> ParamBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = p.clone();
    for s in q.slices_mut() {
        s.iter_mut().for_each(|v| *v += scale * rng.sample::<f64, _>(StandardNormal));
    }
    q
}

fn rollouts(f: &Fixture, params: &ParamBundle, group: usize, sample_anchor: bool) -> RolloutBatch {
    let m = RolloutModels {
        policy: &f.policy,
        params,
        reference: &f.params,
        critic: &f.critic,
        rwm: &f.rwm,
        rwm_params: &f.rwm_params,
        anchors: &f.anchors,
    };
    let eps: Vec<&Episode> = f.episodes.iter().take(2).collect();
    collect_rollouts(&m, &eps, group, sample_anchor, 5).unwrap()
}

fn items<'a>(batch: &'a RolloutBatch, adv: &[f64]) -> Vec<PpoItem<'a>> {
    batch
        .groups
        .iter()
        .flat_map(|g| g.samples.iter().map(move |s| (g, s)))
        .zip(adv)
        .map(|((group, sample), a)| PpoItem { group, sample, advantage: *a })
        .collect()
}

#[test]
fn unchanged_policy_loss_is_discounted_advantage_sum() {
    let f = fixture(8, 2);
    let batch = rollouts(&f, &f.params, 3, true);
    let adv = [0.5, -1.2, 0.3, 2.0, -0.7, 0.1];
    let cfg = PpoConfig::default();
    let out = ppo_policy_loss(&f.policy, &f.params, &f.policy.schedule, &items(&batch, &adv), &cfg, None).unwrap();
    let disc: f64 = (0..8).map(|i| cfg.gamma.powi(i)).sum();
    let n = (adv.len() * 9) as f64;
    let want = -adv.iter().map(|a| a * (1.0 + disc)).sum::<f64>() / n;
    assert!((out.loss - want).abs() < 1e-12, "{} vs {want}", out.loss);
    assert_eq!(out.kl, 0.0);
    assert_eq!(out.clip_fraction, 0.0);
}

#[test]
fn zero_advantage_leaves_only_the_kl_term() {
    let f = fixture(8, 2);
    let moved = jitter(&f.params, 1e-3, 8);
    let batch = rollouts(&f, &moved, 2, true);
    let cfg = PpoConfig::default();
    let its = items(&batch, &[0.0; 4]);
    let out = ppo_policy_loss(&f.policy, &moved, &f.policy.schedule, &its, &cfg, None).unwrap();
    assert_eq!(out.surrogate, 0.0);
    assert!(out.kl > 0.0);
    assert!((out.loss - cfg.kl_coef * out.kl).abs() < 1e-12);

    let mut g1 = moved.zeros_like();
    let mut g2 = moved.zeros_like();
    let half = PpoConfig { kl_coef: 0.05, ..cfg.clone() };
    ppo_policy_loss(&f.policy, &moved, &f.policy.schedule, &its, &cfg, Some(&mut g1)).unwrap();
    ppo_policy_loss(&f.policy, &moved, &f.policy.schedule, &its, &half, Some(&mut g2)).unwrap();
    for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
        assert!((a - 2.0 * b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    // At the reference itself the KL gradient vanishes too.
    let batch = rollouts(&f, &f.params, 2, true);
    let its = items(&batch, &[0.0; 4]);
    let mut g = f.params.zeros_like();
    ppo_policy_loss(&f.policy, &f.params, &f.policy.schedule, &its, &cfg, Some(&mut g)).unwrap();
    assert!(g.to_flat().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn single_step_loss_matches_hand_computation() {
    let f = fixture(1, 1);
    let cfg = PpoConfig {
        sample_anchor: false,
        ..PpoConfig::default()
    };
    for (scale, adv) in [(1e-6, 0.8), (1e-6, -0.8), (1e-3, 0.8), (1e-3, -0.8)] {
        let moved = jitter(&f.params, scale, 4);
        let batch = rollouts(&f, &f.params, 1, false);
        let s = &batch.groups[0].samples[0];
        let chain = &s.chain;
        let sigma = f.policy.schedule.sigmas[1];
        let mu = f.policy.transition_mean(&moved, &chain.states[0], &chain.cond, 1).unwrap();
        let mu_ref = &s.ref_means[0];
        let x = &chain.states[1];
        let ratio = (transition_logprob(&mu, sigma, x) - transition_logprob(mu_ref, sigma, x)).exp();
        let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        let mut surr = (ratio * adv).min(clipped * adv);
        if adv < 0.0 {
            surr = surr.max((1.0 + cfg.clip_eps) * adv);
        }
        let kl: f64 = mu.iter().zip(mu_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * sigma * sigma);
        let want = -surr + cfg.kl_coef * kl;
        let its = items(&batch, &[adv]);
        let out = ppo_policy_loss(&f.policy, &moved, &f.policy.schedule, &its, &cfg, None).unwrap();
        assert!((out.loss - want).abs() <= 1e-6 * (1.0 + want.abs()), "scale {scale} adv {adv}: {} vs {want}", out.loss);
    }
}

#[test]
fn value_loss_examples() {
    let f = fixture(8, 1);
    let conds = f.policy.conditions(&f.episodes[0].ctx, &f.anchors);
    let exact: Vec<_> = conds.iter().map(|c| (c, critic_value(&f.critic, c).unwrap())).collect();
    assert!(value_loss(&f.critic, &exact, None).unwrap() < 1e-24);

    let mut zero = f.critic.clone();
    for s in zero.slices_mut() {
        s.iter_mut().for_each(|v| *v = 0.0);
    }
    let ones: Vec<_> = conds.iter().map(|c| (c, 1.0)).collect();
    assert!((value_loss(&zero, &ones, None).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn singleton_groups_have_no_advantage() {
    let f = fixture(8, 2);
    let batch = rollouts(&f, &f.params, 1, true);
    let est = estimate_advantages(&batch, 9, &PpoConfig::default());
    assert!(est.advantages.iter().flatten().all(|a| *a == 0.0));
}

fn finetune(f: &Fixture, w_il: f64) -> f64 {
    let cfg = PpoConfig {
        w_il,
        iterations: 3,
        group_size: 4,
        scenes_per_iter: 2,
        il_batch: 4,
        minibatch: 8,
        checkpoint_every: 0,
        ..PpoConfig::default()
    };
    let (rollout, rest) = f.episodes.split_at(4);
    let setup = RlSetup {
        policy: &f.policy,
        reference: &f.params,
        rwm: &f.rwm,
        rwm_params: &f.rwm_params,
        anchors: &f.anchors,
        rollout,
        train: rest,
        probe: rest,
        oracle: &f.oracle,
        weights: &EpdmsWeights::default(),
    };
    let mut state = RlState::new(f.params.clone(), f.critic.clone());
    train_rl(&setup, &mut state, &cfg, 6, |_, _| Ok(())).unwrap();
    let plans = |p: &ParamBundle| -> Vec<_> { rest.iter().map(|e| f.policy.plan(p, &e.ctx, &f.anchors).unwrap().1).collect() };
    mean_position_gap(&plans(&f.params), &plans(&state.params))
}

#[test]
fn heavy_imitation_weight_stays_near_the_start() {
    let f = fixture(8, 8);
    let free = finetune(&f, 0.0);
    let anchored = finetune(&f, 100.0);
    println!("plan drift: w_il 0 -> {free:.4} m, w_il 100 -> {anchored:.4} m");
    assert!(free.is_finite() && anchored.is_finite());
    assert!(anchored <= free, "{anchored} > {free}");
}
