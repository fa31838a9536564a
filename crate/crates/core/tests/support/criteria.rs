//! Acceptance checks that run in seconds. Each returns whether it passed and
//! a one-line summary of what was measured.

use std::time::Instant;

use deskdrive_core::anchors::{assign, kmeans_fit_logged, AnchorMeta, AnchorSet};
use deskdrive_core::config::EpdmsWeights;
use deskdrive_core::diffgraph::ParamBundle;
use deskdrive_core::oracle::{aggregate_epdms, Metric, MetricOracle, MetricVector};
use deskdrive_core::policy::{
    condition_len, Condition, DiffusionPolicy, PolicyConfig, SceneContext, DENOISER, SCORER,
};
use deskdrive_core::rl::{
    collect_rollouts, group_standardize, init_critic, ppo_policy_loss, value_loss, PpoConfig, PpoItem, RolloutModels,
};
use deskdrive_core::rwm::{RewardModel, RwmConfig};
use deskdrive_core::dataset::Episode;
use deskdrive_core::scene::{Trajectory, Waypoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{bruteforce, epdms_ref, gradcheck, scenes};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

pub fn a1_oracle_bruteforce(pairs: usize) -> Outcome {
    let started = Instant::now();
    let oracle = MetricOracle::default();
    let mut mismatches = Vec::new();
    let mut failing = [0usize; 8];
    for (i, (scene, traj)) in scenes::random_pairs(0xA1, pairs, &oracle).iter().enumerate() {
        let got = oracle.score_trajectory(traj, scene).expect("horizon fits");
        let want = bruteforce::check(scene, traj, &oracle.world, &oracle.rules);
        for (k, m) in Metric::LEARNED.iter().enumerate() {
            let (g, w) = (got.get(*m).unwrap(), want.get(*m).unwrap());
            let ok = if *m == Metric::Ep { (g - w).abs() <= 1e-9 } else { g == w };
            if !ok {
                mismatches.push(format!("pair {i} {}: oracle {g} checker {w}", m.name()));
            }
            if w < 1.0 {
                failing[k] += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let coverage: Vec<String> = Metric::LEARNED
        .iter()
        .zip(failing)
        .map(|(m, n)| format!("{}:{n}", m.name()))
        .collect();
    Outcome::new(
        mismatches.is_empty() && secs < 60.0,
        format!(
            "{pairs} pairs, {} mismatches{}, {secs:.1}s, non-passing counts [{}]",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default(),
            coverage.join(" ")
        ),
    )
}

pub fn a2_epdms_algebra() -> Outcome {
    let w = EpdmsWeights::default();
    let pass_all = MetricVector::all_pass();
    let mut problems = Vec::new();

    let hand = [
        (MetricVector { ep: 0.5, lk: 0.0, ..pass_all }, 9.5 / 14.0),
        (MetricVector { nc: 0.5, ..pass_all }, 0.5),
        (MetricVector { nc: 0.5, ddc: 0.5, ..pass_all }, 0.25),
        (MetricVector { ttc: 0.0, ..pass_all }, 9.0 / 14.0),
        (MetricVector { ttc: 0.0, ep: 0.0, hc: 0.0, lk: 0.0, ..pass_all }, 0.0),
        (MetricVector { tlc: 0.0, ..pass_all }, 0.0),
        (pass_all, 1.0),
    ];
    for (agent, want) in hand {
        let got = aggregate_epdms(&agent, &pass_all, &w);
        if (got - want).abs() > 1e-12 {
            problems.push(format!("hand case {agent:?}: {got} != {want}"));
        }
    }

    let agents = epdms_ref::agent_grid();
    let humans = epdms_ref::human_grid();
    let mut evaluated = 0usize;
    for a in &agents {
        let base = aggregate_epdms(a, &pass_all, &w);
        if !(0.0..=1.0).contains(&base) {
            problems.push(format!("out of range {base}"));
        }
        // Monotone under an all-pass human: raising any sub-score never lowers the aggregate.
        for f in 0..8 {
            let dom = epdms_ref::domain_of(f);
            let pos = dom.iter().position(|v| *v == epdms_ref::field(a, f)).unwrap();
            if let Some(next) = dom.get(pos + 1) {
                let up = aggregate_epdms(&epdms_ref::with_field(a, f, *next), &pass_all, &w);
                if up < base {
                    problems.push(format!("not monotone in field {f}"));
                }
            }
        }
        for h in &humans {
            let got = aggregate_epdms(a, h, &w);
            evaluated += 1;
            if (got - epdms_ref::reference_epdms(a, h)).abs() > 1e-12 {
                problems.push(format!("mismatch agent {a:?} human {h:?}"));
            }
            // A metric the human fails is waived whatever the agent does there.
            for f in (0..8).filter(|&f| f != 4 && epdms_ref::field(h, f) < 1.0) {
                for v in epdms_ref::domain_of(f) {
                    if aggregate_epdms(&epdms_ref::with_field(a, f, *v), h, &w) != got {
                        problems.push(format!("filter leak in field {f}"));
                    }
                }
            }
        }
    }
    Outcome::new(
        problems.is_empty(),
        format!(
            "{} agent x {} human vectors ({evaluated} pairs), {} violations{}",
            agents.len(),
            humans.len(),
            problems.len(),
            problems.first().map(|p| format!(" (first: {p})")).unwrap_or_default()
        ),
    )
}

/// Scene context plus a condition built from a random trajectory.
fn random_condition(policy: &DiffusionPolicy, rng: &mut ChaCha8Rng) -> (SceneContext, Condition) {
    let oracle = MetricOracle::default();
    let scene = scenes::random_scene(rng, &oracle);
    let traj = scenes::random_trajectory(&scene, rng, &oracle);
    let ctx = SceneContext::new(scene, &policy.world);
    let cond = policy.condition(&ctx, &traj);
    (ctx, cond)
}

fn normal_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Worst relative finite-difference error per architecture over `draws` draws.
pub fn a3_gradients(draws: usize) -> Outcome {
    const TOL: f64 = 1e-4;
    const COORDS: usize = 120;
    let policy = DiffusionPolicy::new(PolicyConfig::default(), Default::default());
    let mut rng = ChaCha8Rng::seed_from_u64(0xA3);
    let mut worst = Vec::new();

    let mut record = |name: &str, errs: Vec<f64>| worst.push((name.to_string(), errs.into_iter().fold(0.0, f64::max)));

    let mut errs = Vec::new();
    for d in 0..draws {
        let params = policy.init_params(100 + d as u64);
        let (_, cond) = random_condition(&policy, &mut rng);
        let x_t = normal_vec(policy.traj_len(), &mut rng);
        let t = rng.gen_range(1..=policy.schedule.tau);
        let g = normal_vec(policy.traj_len(), &mut rng);
        let (_, mut tape) = policy.step_with_tape(&params, &x_t, &cond, t).unwrap();
        let mut grads = params.zeros_like();
        policy.backward_step(&params, &mut tape, &g, &mut grads).unwrap();
        let f = |p: &ParamBundle| {
            let s = policy.step(p, &x_t, &cond, t).unwrap();
            s.x0.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        errs.push(gradcheck::check(&params, &grads, f, COORDS, &mut rng));
    }
    record("denoiser", errs);

    let mut errs = Vec::new();
    for d in 0..draws {
        let params = policy.init_params(200 + d as u64);
        let (_, cond) = random_condition(&policy, &mut rng);
        let (_, mut tape) = policy.score_with_tape(&params, &cond).unwrap();
        let mut grads = params.zeros_like();
        policy.backward_score(&params, &mut tape, 1.0, &mut grads).unwrap();
        let f = |p: &ParamBundle| policy.score_logit(p, &cond).unwrap();
        errs.push(gradcheck::check(&params, &grads, f, COORDS, &mut rng));
    }
    record("scorer", errs);

    let mut errs = Vec::new();
    for d in 0..draws {
        let critic = init_critic(&policy, &[64], 300 + d as u64);
        let conds: Vec<Condition> = (0..4).map(|_| random_condition(&policy, &mut rng).1).collect();
        let targets: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let items: Vec<(&Condition, f64)> = conds.iter().zip(targets.iter().copied()).collect();
        let mut grads = critic.zeros_like();
        value_loss(&critic, &items, Some(&mut grads)).unwrap();
        let f = |p: &ParamBundle| value_loss(p, &items, None).unwrap();
        errs.push(gradcheck::check(&critic, &grads, f, COORDS, &mut rng));
    }
    record("critic", errs);

    let oracle = MetricOracle::default();
    let model = RewardModel::new(oracle.world.clone(), EpdmsWeights::default(), RwmConfig::default());
    let mut errs = Vec::new();
    for d in 0..draws {
        let params = model.init_params(400 + d as u64);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..4 {
            let scene = scenes::random_scene(&mut rng, &oracle);
            let traj = scenes::random_trajectory(&scene, &mut rng, &oracle);
            labels.push(oracle.score_trajectory(&traj, &scene).unwrap());
            let ctx = SceneContext::new(scene, &oracle.world);
            feats.push(model.feature(&ctx, &traj).unwrap());
        }
        let batch: Vec<(&[f64], &MetricVector)> = feats.iter().map(Vec::as_slice).zip(&labels).collect();
        let mut grads = params.zeros_like();
        model.rwm_loss(&params, &batch, Some(&mut grads)).unwrap();
        let f = |p: &ParamBundle| model.rwm_loss(p, &batch, None).unwrap();
        errs.push(gradcheck::check(&params, &grads, f, COORDS, &mut rng));
    }
    record("reward model", errs);

    let mut errs = Vec::new();
    for d in 0..draws {
        let (e, clipped) = ppo_gradient_draw(&policy, &model, 500 + d as u64, &mut rng);
        if clipped < 1.0 {
            errs.push(e);
        }
    }
    let ppo_draws = errs.len();
    record("ppo objective", errs);

    let pass = worst.iter().all(|(_, e)| *e <= TOL) && ppo_draws >= draws;
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Outcome::new(pass, format!("{draws} draws each, max rel err: {}", parts.join(", ")))
}

/// Policy loss gradient near the reference so that most ratios are unclipped.
/// Returns the error and the clip fraction.
fn ppo_gradient_draw(policy: &DiffusionPolicy, model: &RewardModel, seed: u64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let oracle = MetricOracle::default();
    let reference = policy.init_params(seed);
    let mut params = reference.clone();
    let mut flat = params.to_flat();
    for v in &mut flat {
        *v += 1e-5 * rng.sample::<f64, _>(StandardNormal);
    }
    params.set_flat(&flat).unwrap();

    let scene = scenes::random_scene(rng, &oracle);
    let anchors: Vec<Trajectory> = (0..4).map(|_| scenes::random_trajectory(&scene, rng, &oracle)).collect();
    let anchors = AnchorSet {
        k: anchors.len(),
        seed: 0,
        anchors,
        meta: AnchorMeta {
            demos: 4,
            iterations: 0,
            inertia: 0.0,
            created_by: "test".into(),
        },
    };
    let ep = Episode {
        scene_id: seed,
        ctx: SceneContext::new(scene.clone(), &oracle.world),
        expert: anchors.anchors[0].clone(),
        expert_metrics: MetricVector::all_pass(),
        reference_progress: 10.0,
    };
    let rwm_params = model.init_params(seed);
    let critic = init_critic(policy, &[16], seed);
    let models = RolloutModels {
        policy,
        params: &reference,
        reference: &reference,
        critic: &critic,
        rwm: model,
        rwm_params: &rwm_params,
        anchors: &anchors,
    };
    let batch = collect_rollouts(&models, &[&ep], 3, true, seed).unwrap();
    let cfg = PpoConfig::default();
    let group = &batch.groups[0];
    let items: Vec<PpoItem> = group
        .samples
        .iter()
        .map(|s| PpoItem {
            group,
            sample: s,
            advantage: rng.gen_range(-1.5..1.5),
        })
        .collect();
    let mut grads = params.zeros_like();
    let out = ppo_policy_loss(policy, &params, &policy.schedule, &items, &cfg, Some(&mut grads)).unwrap();
    let f = |p: &ParamBundle| ppo_policy_loss(policy, p, &policy.schedule, &items, &cfg, None).unwrap().loss;
    (gradcheck::check(&params, &grads, f, 120, rng), out.clip_fraction)
}

pub fn a5_advantages(groups: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA5);
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    let mut worst_affine: f64 = 0.0;
    let mut degenerate_ok = true;
    for _ in 0..groups {
        let n = rng.gen_range(2..=64);
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let offset = rng.gen_range(-100.0..100.0);
        let r: Vec<f64> = (0..n).map(|_| offset + scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let adv = group_standardize(&r);
        let mean = adv.iter().sum::<f64>() / n as f64;
        let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
        let a = 10f64.powf(rng.gen_range(-2.0..2.0));
        let b = rng.gen_range(-1e3..1e3);
        let moved = group_standardize(&r.iter().map(|v| a * v + b).collect::<Vec<_>>());
        let diff = adv.iter().zip(&moved).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst_affine = worst_affine.max(diff);

        let c = rng.gen_range(-10.0..10.0);
        degenerate_ok &= group_standardize(&vec![c; n]).iter().all(|v| *v == 0.0);
    }
    degenerate_ok &= group_standardize(&[3.0]) == vec![0.0];
    let pass = worst_mean <= 1e-6 && worst_var <= 1e-6 && worst_affine <= 1e-6 && degenerate_ok;
    Outcome::new(
        pass,
        format!(
            "{groups} groups: |mean| {worst_mean:.1e}, |var-1| {worst_var:.1e}, affine drift {worst_affine:.1e}, zero-variance groups zeroed: {degenerate_ok}"
        ),
    )
}

fn sigma_of(cfg: &PolicyConfig, t: usize) -> f64 {
    let beta = |k: usize| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * (k - 1) as f64 / (cfg.tau - 1) as f64;
    // 1 - prod(1 - beta) through log1p/expm1, free of cancellation.
    let one_minus_ab = |k: usize| -(1..=k).map(|j| (-beta(j)).ln_1p()).sum::<f64>().exp_m1();
    (beta(t) * one_minus_ab(t - 1) / one_minus_ab(t)).sqrt().max(cfg.sigma_min)
}

pub fn a6_diffusion_contracts() -> Outcome {
    let cfg = PolicyConfig::default();
    let policy = DiffusionPolicy::new(cfg.clone(), Default::default());
    let mut rng = ChaCha8Rng::seed_from_u64(0xA6);
    let mut notes = Vec::new();

    let mut deterministic = true;
    let mut ll_err: f64 = 0.0;
    for d in 0..10 {
        let params = policy.init_params(600 + d);
        let (_, cond) = random_condition(&policy, &mut rng);
        let noiseless = policy.schedule.noiseless();
        let a = policy.sample_chain(&params, &noiseless, 0, &cond, 1).unwrap();
        let b = policy.sample_chain(&params, &noiseless, 0, &cond, 99).unwrap();
        deterministic &= a == b && a == policy.mean_chain(&params, 0, &cond).unwrap();

        let chain = policy.sample_chain(&params, &policy.schedule, 0, &cond, rng.gen()).unwrap();
        let mut sum = 0.0;
        for i in 0..cfg.tau {
            let t = cfg.tau - i;
            let mu = policy.transition_mean(&params, &chain.states[i], &cond, t).unwrap();
            let s = sigma_of(&cfg, t);
            for (m, x) in mu.iter().zip(&chain.states[i + 1]) {
                sum += -0.5 * ((x - m) / s).powi(2) - 0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln();
            }
        }
        let ll = chain.log_likelihood(&policy.schedule);
        ll_err = ll_err.max((ll - sum).abs() / ll.abs().max(1.0));
    }
    if !deterministic {
        notes.push("noiseless chains differ".to_string());
    }
    if ll_err > 1e-12 {
        notes.push(format!("log-likelihood error {ll_err:.1e}"));
    }

    let (loss, bound) = constructed_optimum_loss(&policy);
    if loss > bound {
        notes.push(format!("optimum loss {loss:.3e} above clamp bound {bound:.3e}"));
    }
    Outcome::new(
        notes.is_empty(),
        format!(
            "noiseless deterministic: {deterministic}, log-likelihood rel err {ll_err:.1e}, optimum loss {loss:.2e} (bound {bound:.2e}){}",
            if notes.is_empty() { String::new() } else { format!("; {}", notes.join("; ")) }
        ),
    )
}

/// Four straight anchors at increasing speed; the demonstration is the
/// fastest anchor plus a representable residual. The denoiser ignores its
/// input and emits that residual; the scorer thresholds total forward
/// displacement so only the fastest anchor gets a large logit.
pub fn constructed_optimum_loss(policy: &DiffusionPolicy) -> (f64, f64) {
    let world = &policy.world;
    let straight = |v: f64| Trajectory::new((1..=world.horizon).map(|k| Waypoint::new(v * world.dt * k as f64, 0.0, 0.0)).collect(), world.dt);
    let speeds = [2.0, 5.0, 8.0, 11.0];
    let anchors = AnchorSet {
        k: 4,
        seed: 0,
        anchors: speeds.iter().map(|v| straight(*v)).collect(),
        meta: AnchorMeta {
            demos: 4,
            iterations: 0,
            inertia: 0.0,
            created_by: "test".into(),
        },
    };
    let assigned = 3;
    let residual: Vec<f64> = (0..policy.residual_len()).map(|i| 0.01 * (i as f64 + 1.0)).collect();
    let x0: Vec<f64> = policy
        .codec
        .encode(&anchors.anchors[assigned])
        .iter()
        .zip(policy.expand_residual(&residual))
        .map(|(a, r)| a + r)
        .collect();
    let gt = policy.codec.decode(&x0, world.dt);
    assert_eq!(assign(&gt, &anchors), assigned);

    let mut params = policy.init_params(7);
    for l in &mut params.net_mut(DENOISER).layers {
        l.weight.iter_mut().for_each(|w| *w = 0.0);
        l.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    params.net_mut(DENOISER).layers.last_mut().unwrap().bias.copy_from_slice(&residual);

    // Forward displacement sum (normalized) of each anchor; threshold halfway
    // between the two fastest.
    let disp = |v: f64| (1..=world.horizon).map(|k| v * world.dt * k as f64 / policy.codec.x_scale).sum::<f64>();
    let threshold = 0.5 * (disp(speeds[2]) + disp(speeds[3]));
    let scorer = params.net_mut(SCORER);
    for l in &mut scorer.layers {
        l.weight.iter_mut().for_each(|w| *w = 0.0);
        l.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    let gain = 1e4;
    let first = &mut scorer.layers[0];
    for k in 0..world.horizon {
        first.weight[3 * k] = gain;
    }
    first.bias[0] = -gain * threshold;
    scorer.layers.last_mut().unwrap().weight[0] = 1e3;

    let oracle = MetricOracle::default();
    let scene = deskdrive_core::scene::generate_scene(0, deskdrive_core::scene::Difficulty::Easy, world);
    let _ = condition_len(world);
    let ctx = SceneContext::new(scene, &oracle.world);
    let lambda = policy.cfg.bce_weight;
    let report = policy.imitation_loss(&params, &[(&ctx, &gt)], &anchors, lambda, 3, None).unwrap();
    let bound = lambda * anchors.len() as f64 * -(1.0f64 - 1e-6).ln() + 1e-12;
    (report.loss, bound)
}

pub fn a8_kmeans(datasets: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA8);
    let mut increases = 0;
    let mut assign_errors = 0;
    let mut fits = 0;
    for d in 0..datasets {
        let n = rng.gen_range(8..80);
        let horizon = rng.gen_range(2..6);
        let k = rng.gen_range(1..=n.min(10));
        let clusters = rng.gen_range(1..5);
        let centers: Vec<(f64, f64)> = (0..clusters).map(|_| (rng.gen_range(-20.0..20.0), rng.gen_range(-5.0..5.0))).collect();
        let demos: Vec<Trajectory> = (0..n)
            .map(|_| {
                let c = centers[rng.gen_range(0..clusters)];
                let wps = (0..horizon)
                    .map(|j| {
                        let f = (j + 1) as f64;
                        Waypoint::new(c.0 * f + rng.gen_range(-2.0..2.0), c.1 * f + rng.gen_range(-1.0..1.0), 0.0)
                    })
                    .collect();
                Trajectory::new(wps, 0.5)
            })
            .collect();
        let (set, log) = kmeans_fit_logged(&demos, k, d as u64, 100).unwrap();
        fits += 1;
        increases += log.inertia.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-12)).count();

        // Duplicate an anchor to create exact ties.
        let mut anchors = set.clone();
        anchors.anchors.push(anchors.anchors[0].clone());
        for t in demos.iter().chain(&anchors.anchors) {
            let p = t.positions();
            let dists: Vec<f64> = anchors
                .anchors
                .iter()
                .map(|a| a.positions().iter().zip(&p).map(|(x, y)| (x - y) * (x - y)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let want = dists.iter().position(|v| *v == min).unwrap();
            if assign(t, &anchors) != want {
                assign_errors += 1;
            }
        }
    }
    Outcome::new(
        increases == 0 && assign_errors == 0,
        format!("{fits} fits, {increases} inertia increases, {assign_errors} assignment mismatches"),
    )
}
