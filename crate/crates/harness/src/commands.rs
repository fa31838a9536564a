//! The pipeline stages. Each command reads its inputs from the run layout,
//! echoes the materialized config into its output directory and returns a
//! serializable report.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use deskdrive_core::anchors::{kmeans_fit, AnchorSet};
use deskdrive_core::dataset::{build_scenes, collect_reward_samples, read_jsonl, write_jsonl, Episode, RewardSample, SceneRecord, Split};
use deskdrive_core::diffgraph::{AdamState, Checkpoint, ParamBundle};
use deskdrive_core::eval::{evaluate_with, score_episode, summarize, EvalSummary, SceneScore};
use deskdrive_core::oracle::{aggregate_epdms, MetricOracle, MetricVector};
use deskdrive_core::policy::{train_imitation, DiffusionPolicy, SceneContext};
use deskdrive_core::rl::{init_critic, train_rl, IterationLog, RlEvent, RlSetup, RlState};
use deskdrive_core::rwm::{train_rwm, RewardModel, RwmReport};
use deskdrive_core::scene::{Trajectory, Waypoint};

use crate::config::{EvalSource, RunConfig};
use crate::error::{HarnessError, Result};

pub const EVAL_COLUMNS: [&str; 10] = ["scene_id", "NC", "DAC", "DDC", "TLC", "EP", "TTC", "LK", "HC", "EPDMS"];

fn oracle(cfg: &RunConfig) -> MetricOracle {
    MetricOracle::new(cfg.world.clone(), cfg.oracle.clone())
}

fn policy(cfg: &RunConfig) -> DiffusionPolicy {
    DiffusionPolicy::new(cfg.policy.clone(), cfg.world.clone())
}

fn require(path: &Path, missing: fn(PathBuf) -> HarnessError) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(path.to_path_buf()))
    }
}

fn load_scenes(cfg: &RunConfig, split: Split) -> Result<Vec<SceneRecord>> {
    let path = cfg.layout().scenes(split);
    require(&path, HarnessError::MissingDataset)?;
    Ok(read_jsonl(&path)?)
}

fn episodes(cfg: &RunConfig, split: Split) -> Result<Vec<Episode>> {
    Ok(load_scenes(cfg, split)?
        .iter()
        .map(|r| Episode::from_record(r, &cfg.world))
        .collect())
}

fn load_anchors(cfg: &RunConfig) -> Result<AnchorSet> {
    let path = cfg.layout().anchors(cfg.anchors_k);
    require(&path, HarnessError::MissingDataset)?;
    Ok(AnchorSet::load(&path)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require(path, HarnessError::MissingCheckpoint)?;
    Ok(Checkpoint::load(path)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn metric_row(m: &MetricVector) -> [f64; 8] {
    [m.nc, m.dac, m.ddc, m.tlc, m.ep, m.ttc, m.lk, m.hc]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataReport {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub rl_scenes: usize,
    pub anchor_files: Vec<PathBuf>,
    pub reward_samples: usize,
    pub provenance_counts: BTreeMap<String, usize>,
}

/// Scenes for every split, anchor vocabularies and the labeled reward set.
pub fn gen_data(cfg: &RunConfig) -> Result<GenDataReport> {
    let layout = cfg.layout();
    let dir = layout.data_dir();
    cfg.echo_into(&dir)?;
    let oracle = oracle(cfg);
    let train = build_scenes(cfg.seed, Split::Train, cfg.data.train_scenes, &cfg.data, &oracle);
    let eval = build_scenes(cfg.seed, Split::Eval, cfg.data.eval_scenes, &cfg.data, &oracle);
    let rl = build_scenes(cfg.seed, Split::Rl, cfg.data.rl_scenes, &cfg.data, &oracle);
    write_jsonl(&layout.scenes(Split::Train), &train)?;
    write_jsonl(&layout.scenes(Split::Eval), &eval)?;
    write_jsonl(&layout.scenes(Split::Rl), &rl)?;

    let demos: Vec<Trajectory> = train.iter().map(|r| r.expert.clone()).collect();
    let mut sets = Vec::new();
    let mut anchor_files = Vec::new();
    for &k in &cfg.data.anchor_ks {
        let set = kmeans_fit(&demos, k, cfg.seed)?;
        let path = layout.anchors(k);
        set.save(&path)?;
        anchor_files.push(path);
        sets.push(set);
    }
    let p = policy(cfg);
    let samples = collect_reward_samples(&train, &sets, &cfg.data, &p.schedule, &p.codec, &oracle, &cfg.weights, cfg.seed)?;
    write_jsonl(&layout.reward_samples(), &samples)?;
    let mut provenance_counts = BTreeMap::new();
    for s in &samples {
        *provenance_counts.entry(s.provenance.tag().to_string()).or_insert(0) += 1;
    }
    let report = GenDataReport {
        train_scenes: train.len(),
        eval_scenes: eval.len(),
        rl_scenes: rl.len(),
        anchor_files,
        reward_samples: samples.len(),
        provenance_counts,
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub last_epoch: usize,
    pub step: u64,
    pub val_l1_m: f64,
    pub val_accuracy: f64,
    pub checkpoint: PathBuf,
}

/// Stage 1: imitation learning on expert demonstrations.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    let layout = cfg.layout();
    let train = episodes(cfg, Split::Train)?;
    let anchors = load_anchors(cfg)?;
    let dir = layout.pretrain_dir();
    cfg.echo_into(&dir)?;
    let ckpt_path = layout.pretrain_checkpoint();
    let metrics_path = dir.join("metrics.csv");
    let p = policy(cfg);
    let resumed = cfg.resume && ckpt_path.exists();
    let (mut params, mut state) = if resumed {
        let ck = Checkpoint::load(&ckpt_path)?;
        let state = ck.optimizer.unwrap_or_else(|| AdamState::new(&ck.params));
        (ck.params, state)
    } else {
        let params = p.init_params(cfg.seed);
        let state = AdamState::new(&params);
        (params, state)
    };
    let mut csv = if resumed && metrics_path.exists() {
        BufWriter::new(File::options().append(true).open(&metrics_path)?)
    } else {
        let mut w = BufWriter::new(File::create(&metrics_path)?);
        writeln!(w, "epoch,step,train_loss,val_loss,val_l1_m,val_accuracy")?;
        w
    };
    let data: Vec<_> = train.iter().map(|e| (&e.ctx, &e.expert)).collect();
    let log = train_imitation(&p, &mut params, &mut state, &data, &anchors, &cfg.pretrain, cfg.seed, |e, params, state| {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            e.epoch, e.step, e.train_loss, e.val_loss, e.val_l1_m, e.val_accuracy
        )?;
        csv.flush()?;
        let ck = Checkpoint {
            params: params.clone(),
            optimizer: Some(state.clone()),
            counter: state.step,
        };
        ck.save(&ckpt_path)?;
        eprintln!(
            "pretrain epoch {} step {} loss {:.4} val_l1 {:.3} m acc {:.3}",
            e.epoch, e.step, e.train_loss, e.val_l1_m, e.val_accuracy
        );
        Ok(())
    })?;
    Checkpoint {
        params,
        optimizer: Some(state.clone()),
        counter: state.step,
    }
    .save(&ckpt_path)?;
    let last = log.last();
    let report = PretrainReport {
        epochs_run: log.len(),
        last_epoch: last.map_or(0, |e| e.epoch),
        step: state.step,
        val_l1_m: last.map_or(f64::NAN, |e| e.val_l1_m),
        val_accuracy: last.map_or(f64::NAN, |e| e.val_accuracy),
        checkpoint: ckpt_path,
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// Stage 2: reward world model on the labeled samples.
pub fn train_rwm_cmd(cfg: &RunConfig) -> Result<RwmReport> {
    let layout = cfg.layout();
    let samples_path = layout.reward_samples();
    require(&samples_path, HarnessError::MissingDataset)?;
    let samples: Vec<RewardSample> = read_jsonl(&samples_path)?;
    let scenes = load_scenes(cfg, Split::Train)?;
    let contexts: HashMap<u64, SceneContext> = scenes
        .iter()
        .map(|r| (r.scene_id, SceneContext::new(r.scene.clone(), &cfg.world)))
        .collect();
    let dir = layout.rwm_dir();
    cfg.echo_into(&dir)?;
    let model = RewardModel::new(cfg.world.clone(), cfg.weights.clone(), cfg.rwm.clone());
    let (params, report) = train_rwm(&model, &samples, &contexts, cfg.seed, |e| {
        eprintln!("rwm epoch {} train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_loss);
    })?;
    Checkpoint {
        params,
        optimizer: None,
        counter: report.best_epoch as u64,
    }
    .save(&layout.rwm_checkpoint())?;
    write_json(&dir.join("report.json"), &report)?;
    let mut w = BufWriter::new(File::create(dir.join("report.csv"))?);
    writeln!(w, "metric,value")?;
    for m in &report.metrics {
        writeln!(w, "{},{}", m.metric, m.value)?;
    }
    writeln!(w, "spearman,{}", report.spearman)?;
    let mut w = BufWriter::new(File::create(dir.join("epochs.csv"))?);
    writeln!(w, "epoch,train_loss,val_loss")?;
    for e in &report.epochs {
        writeln!(w, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlReport {
    pub w_il: f64,
    pub iterations: usize,
    /// Oracle EPDMS of the stage-1 policy on the held-out scenes.
    pub baseline_epdms: f64,
    pub final_epdms: f64,
    pub final_kl: f64,
    pub kl_bound: f64,
    /// Every logged value finite and optimizer steps strictly increasing.
    pub stable: bool,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn rl_checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("policy.ckpt"), dir.join("critic.ckpt"))
}

fn save_rl_state(dir: &Path, state: &RlState) -> Result<()> {
    let (p, c) = rl_checkpoint_paths(dir);
    Checkpoint {
        params: state.params.clone(),
        optimizer: Some(state.optimizer.clone()),
        counter: state.iteration as u64,
    }
    .save(&p)?;
    Checkpoint {
        params: state.critic.clone(),
        optimizer: Some(state.critic_optimizer.clone()),
        counter: state.iteration as u64,
    }
    .save(&c)?;
    Ok(())
}

/// Stage 3: PPO fine-tuning in the learned reward model.
pub fn rl_finetune(cfg: &RunConfig) -> Result<RlReport> {
    run_rl(cfg, &cfg.layout().rl_dir())
}

/// Fine-tunes into `dir`; shared by the single run and the ablation sweep.
pub fn run_rl(cfg: &RunConfig, dir: &Path) -> Result<RlReport> {
    let layout = cfg.layout();
    let reference = load_checkpoint(&layout.pretrain_checkpoint())?.params;
    let rwm_params = load_checkpoint(&layout.rwm_checkpoint())?.params;
    let anchors = load_anchors(cfg)?;
    let train = episodes(cfg, Split::Train)?;
    let rollout = episodes(cfg, Split::Rl)?;
    let probe = episodes(cfg, Split::Eval)?;
    cfg.echo_into(dir)?;
    let p = policy(cfg);
    let oracle = oracle(cfg);
    let model = RewardModel::new(cfg.world.clone(), cfg.weights.clone(), cfg.rwm.clone());

    let (policy_path, critic_path) = rl_checkpoint_paths(dir);
    let mut state = if cfg.resume && policy_path.exists() && critic_path.exists() {
        let pc = Checkpoint::load(&policy_path)?;
        let cc = Checkpoint::load(&critic_path)?;
        let mut s = RlState::new(pc.params, cc.params);
        if let Some(o) = pc.optimizer {
            s.optimizer = o;
        }
        if let Some(o) = cc.optimizer {
            s.critic_optimizer = o;
        }
        s.iteration = pc.counter as usize;
        s
    } else {
        RlState::new(reference.clone(), init_critic(&p, &cfg.rl.critic_hidden, cfg.seed ^ 0xC217))
    };

    let plan = |params: &ParamBundle| {
        evaluate_with(&probe, &oracle, &cfg.weights, |ep| p.plan(params, &ep.ctx, &anchors).map(|(_, t)| t))
    };
    let baseline_epdms = summarize(&plan(&reference)?).mean_epdms;

    let log_path = dir.join("log.csv");
    let resumed = cfg.resume && state.iteration > 0 && log_path.exists();
    let mut csv = if resumed {
        BufWriter::new(File::options().append(true).open(&log_path)?)
    } else {
        let mut w = BufWriter::new(File::create(&log_path)?);
        writeln!(w, "{}", IterationLog::CSV_HEADER)?;
        w
    };
    let setup = RlSetup {
        policy: &p,
        reference: &reference,
        rwm: &model,
        rwm_params: &rwm_params,
        anchors: &anchors,
        rollout: &rollout,
        train: &train,
        probe: &probe,
        oracle: &oracle,
        weights: &cfg.weights,
    };
    let every = cfg.rl.checkpoint_every;
    let logs = train_rl(&setup, &mut state, &cfg.rl, cfg.seed, |ev, st| {
        match ev {
            RlEvent::Iteration(l) => {
                writeln!(csv, "{}", l.csv_row())?;
                csv.flush()?;
                eprintln!(
                    "rl iter {} reward {:.4} probe {:.4} kl {:.4}",
                    l.iteration, l.reward_mean, l.probe_epdms, l.kl
                );
                if every > 0 && l.iteration % every == 0 {
                    save_rl_state(dir, st).map_err(|e| deskdrive_core::Error::Checkpoint(e.to_string()))?;
                }
            }
            RlEvent::Diverged(msg) => {
                eprintln!("rl diverged: {msg}");
                save_rl_state(dir, st).map_err(|e| deskdrive_core::Error::Checkpoint(e.to_string()))?;
            }
        }
        Ok(())
    })?;
    save_rl_state(dir, &state)?;

    let final_epdms = summarize(&plan(&state.params)?).mean_epdms;
    let stable = logs.iter().all(|l| {
        [l.reward_mean, l.kl, l.policy_loss, l.surrogate, l.il_loss, l.value_loss]
            .iter()
            .all(|v| v.is_finite())
    }) && logs.windows(2).all(|w| w[1].step > w[0].step && w[1].iteration > w[0].iteration);
    let report = RlReport {
        w_il: cfg.rl.w_il,
        iterations: state.iteration,
        baseline_epdms,
        final_epdms,
        final_kl: logs.last().map_or(0.0, |l| l.kl),
        kl_bound: cfg.rl.kl_bound,
        stable,
        checkpoint: policy_path,
        log: log_path,
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: EvalSource,
    pub checkpoint: Option<PathBuf>,
    pub summary: EvalSummary,
    pub per_scene: PathBuf,
}

/// Straight line along the heading at the initial speed.
pub fn constant_velocity(ep: &Episode, cfg: &RunConfig) -> Trajectory {
    let v = ep.ctx.scene.ego0.speed;
    let dt = cfg.world.dt;
    let wps = (1..=cfg.world.horizon)
        .map(|k| Waypoint::new(v * dt * k as f64, 0.0, 0.0))
        .collect();
    Trajectory::new(wps, dt)
}

pub fn write_scores_csv(path: &Path, scores: &[SceneScore]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", EVAL_COLUMNS.join(","))?;
    for s in scores {
        let m = metric_row(&s.metrics);
        write!(w, "{}", s.scene_id)?;
        for v in m {
            write!(w, ",{v}")?;
        }
        writeln!(w, ",{}", s.epdms)?;
    }
    Ok(())
}

/// Scores the chosen trajectory source on the held-out scenes.
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    let layout = cfg.layout();
    let eps = episodes(cfg, Split::Eval)?;
    let oracle = oracle(cfg);
    let (scores, checkpoint) = match cfg.eval.source {
        EvalSource::Expert => (evaluate_with(&eps, &oracle, &cfg.weights, |ep| Ok(ep.expert.clone()))?, None),
        EvalSource::ConstantVelocity => (
            evaluate_with(&eps, &oracle, &cfg.weights, |ep| Ok(constant_velocity(ep, cfg)))?,
            None,
        ),
        EvalSource::Policy => {
            let path = cfg
                .eval
                .checkpoint
                .clone()
                .unwrap_or_else(|| rl_checkpoint_paths(&layout.rl_dir()).0);
            let params = load_checkpoint(&path)?.params;
            let anchors = load_anchors(cfg)?;
            let p = policy(cfg);
            let scores = evaluate_with(&eps, &oracle, &cfg.weights, |ep| p.plan(&params, &ep.ctx, &anchors).map(|(_, t)| t))?;
            (scores, Some(path))
        }
    };
    let dir = layout.eval_dir(&cfg.eval.name);
    cfg.echo_into(&dir)?;
    let per_scene = dir.join("per_scene.csv");
    write_scores_csv(&per_scene, &scores)?;
    let report = EvalReport {
        source: cfg.eval.source,
        checkpoint,
        summary: summarize(&scores),
        per_scene,
    };
    write_json(&dir.join("summary.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub w_il: f64,
    pub baseline_epdms: f64,
    pub final_epdms: f64,
    pub final_kl: f64,
    pub stable: bool,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Value with the highest final EPDMS; reported, not asserted.
    pub best_w_il: Option<f64>,
    pub table: PathBuf,
}

/// Fine-tunes once per imitation weight with everything else shared.
pub fn ablate_wil(cfg: &RunConfig) -> Result<AblationReport> {
    let dir = cfg.layout().ablate_dir();
    cfg.echo_into(&dir)?;
    let mut rows = Vec::new();
    for &v in &cfg.ablate.values {
        let mut run = cfg.clone();
        run.rl.w_il = v;
        run.resume = false;
        let run_dir = dir.join(format!("w_il_{v}"));
        let r = run_rl(&run, &run_dir)?;
        rows.push(AblationRow {
            w_il: v,
            baseline_epdms: r.baseline_epdms,
            final_epdms: r.final_epdms,
            final_kl: r.final_kl,
            stable: r.stable,
            run_dir,
        });
    }
    let table = dir.join("table.csv");
    let mut w = BufWriter::new(File::create(&table)?);
    writeln!(w, "w_il,baseline_epdms,final_epdms,final_kl,stable")?;
    for r in &rows {
        writeln!(w, "{},{},{},{},{}", r.w_il, r.baseline_epdms, r.final_epdms, r.final_kl, r.stable)?;
    }
    let best_w_il = rows
        .iter()
        .max_by(|a, b| a.final_epdms.total_cmp(&b.final_epdms))
        .map(|r| r.w_il);
    let report = AblationReport { rows, best_w_il, table };
    write_json(&dir.join("table.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rows: usize,
    pub output: PathBuf,
}

/// Re-scores every trajectory of a reward-sample file with the oracle.
pub fn score(cfg: &RunConfig, input: Option<&Path>, output: Option<&Path>) -> Result<ScoreReport> {
    let layout = cfg.layout();
    let input = input.map_or_else(|| layout.reward_samples(), Path::to_path_buf);
    require(&input, HarnessError::MissingDataset)?;
    let samples: Vec<RewardSample> = read_jsonl(&input)?;
    let scenes = load_scenes(cfg, Split::Train)?;
    let by_id: HashMap<u64, &SceneRecord> = scenes.iter().map(|r| (r.scene_id, r)).collect();
    let oracle = oracle(cfg);
    let output = output.map_or_else(|| layout.data_dir().join("scores.csv"), Path::to_path_buf);
    let mut w = BufWriter::new(File::create(&output)?);
    let ec = cfg.weights.enable_ec;
    let mut header: Vec<&str> = EVAL_COLUMNS[..9].to_vec();
    if ec {
        header.push("EC");
    }
    header.push("EPDMS");
    writeln!(w, "{}", header.join(","))?;
    for s in &samples {
        let rec = by_id
            .get(&s.scene_id)
            .ok_or_else(|| HarnessError::Config(format!("sample references unknown scene {}", s.scene_id)))?;
        let mut m = oracle.score_with_reference(&s.trajectory, &rec.scene, rec.reference_progress)?;
        let mut human = rec.expert_metrics;
        if ec {
            m.ec = Some(oracle.score_ec(&s.trajectory, &rec.expert));
            human.ec = Some(1.0);
        }
        write!(w, "{}", s.scene_id)?;
        for v in metric_row(&m) {
            write!(w, ",{v}")?;
        }
        if ec {
            write!(w, ",{}", m.ec.unwrap_or(1.0))?;
        }
        writeln!(w, ",{}", aggregate_epdms(&m, &human, &cfg.weights))?;
    }
    Ok(ScoreReport {
        rows: samples.len(),
        output,
    })
}

/// Convenience for tests and the acceptance suite: oracle scores of the
/// policy stored at `checkpoint` on the held-out scenes.
pub fn score_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<SceneScore>> {
    let params = load_checkpoint(checkpoint)?.params;
    let anchors = load_anchors(cfg)?;
    let eps = episodes(cfg, Split::Eval)?;
    let p = policy(cfg);
    let oracle = oracle(cfg);
    Ok(eps
        .iter()
        .map(|ep| {
            let (_, t) = p.plan(&params, &ep.ctx, &anchors)?;
            score_episode(ep, &t, &oracle, &cfg.weights)
        })
        .collect::<deskdrive_core::Result<_>>()?)
}
