//! Experiment protocols: single-task experts, the multi-task prior,
//! fine-tuning from a checkpoint, behavior-cloning distillation, evaluation
//! sweeps and transfer summaries.
//!
//! Every training run owns a directory:
//!
//! ```text
//! <run>/config.snapshot          canonical run config
//! <run>/manifest.toml            kind, config hash, seed, tasks, checkpoints, wall clock
//! <run>/metrics.csv              one row per PPO iteration (or distillation epoch)
//! <run>/evaluations.csv          periodic deterministic evaluations, one row per task
//! <run>/checkpoints/iter_<n>.ckpt
//! <run>/eval/<noise>mm.csv       written by the evaluation command
//! ```
//!
//! Wall-clock time is only written to the manifest, so CSV outputs of a rerun
//! with the same config and seed are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{run_episodes, stream_rng, ActionMode, ActorCritic, EpisodeJob, RecordFlags};
use crate::checkpoint::{self, CheckpointManifest};
use crate::config::RunConfig;
use crate::env::ObservationSpec;
use crate::error::{Error, Result};
use crate::nn::{Adadelta, ForwardCache, Mlp, RunningNormalizer};
use crate::ppo::{collect_rollouts, ppo_update, PpoOptimizer};
use crate::tasks::TaskSpec;

/// Log standard deviation a fine-tuned policy restarts from.
pub const FINETUNE_LOG_STD: f64 = -std::f64::consts::LN_2;

const EVAL_KEY: u64 = 0x4556_414C;
const DISTILL_KEY: u64 = 0x4449_5354;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkflowConfig {
    pub expert_iters: usize,
    pub prior_iters: usize,
    pub finetune_iters: usize,
    /// Prior checkpoint iterations; empty derives them from `prior_iters`.
    pub milestones: Vec<usize>,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub solve_threshold: f64,
    /// End a run at the first evaluation where every task is solved.
    pub stop_when_solved: bool,
    pub seeds: Vec<u64>,
    pub distill_samples_per_expert: usize,
    pub distill_lr: f64,
    pub distill_batch: usize,
    pub distill_epochs: usize,
    pub noise_levels_mm: Vec<f64>,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            expert_iters: 500,
            prior_iters: 2000,
            finetune_iters: 500,
            milestones: Vec::new(),
            eval_every: 10,
            eval_episodes: 20,
            solve_threshold: 0.8,
            stop_when_solved: false,
            seeds: vec![0, 1, 2],
            distill_samples_per_expert: 100_000,
            distill_lr: 0.25,
            distill_batch: 256,
            distill_epochs: 10,
            noise_levels_mm: vec![0.0, 5.0, 10.0, 25.0, 50.0, 100.0],
        }
    }
}

impl WorkflowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("workflow: {m}")));
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval_every and eval_episodes must be positive");
        }
        if !(0.0..=1.0).contains(&self.solve_threshold) {
            return bad("solve_threshold must lie in [0, 1]");
        }
        if self.distill_batch == 0 || !(self.distill_lr > 0.0) {
            return bad("distill_batch and distill_lr must be positive");
        }
        if self.noise_levels_mm.iter().any(|n| !(*n >= 0.0) || !n.is_finite()) {
            return bad("noise levels must be finite and non-negative");
        }
        Ok(())
    }

    pub fn prior_milestones(&self) -> Vec<usize> {
        if self.milestones.is_empty() {
            default_milestones(self.prior_iters)
        } else {
            self.milestones.clone()
        }
    }
}

/// The reference schedule {2.5k, 7.5k, 12.5k, 37.5k} rescaled so that 12.5k
/// maps onto `budget`, capped at the budget and deduplicated.
pub fn default_milestones(budget: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [2500.0, 7500.0, 12500.0, 37500.0]
        .iter()
        .map(|m| ((m * budget as f64 / 12500.0).round() as usize).min(budget))
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Expert,
    Prior,
    Finetune,
    Student,
}

impl RunKind {
    pub fn name(self) -> &'static str {
        match self {
            RunKind::Expert => "expert",
            RunKind::Prior => "prior",
            RunKind::Finetune => "finetune",
            RunKind::Student => "student",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub samples: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub train_success: f64,
    pub train_pos_error: f64,
    pub train_ori_error: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iteration: usize,
    pub task: String,
    pub success: f64,
    pub pos_error: f64,
    pub ori_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub kind: RunKind,
    pub config_hash: String,
    pub seed: u64,
    pub task_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_kind: Option<String>,
    pub checkpoints: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_checkpoint: Option<String>,
    pub best_iteration: usize,
    pub best_success: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_checkpoint: Option<String>,
    pub iterations_completed: usize,
    pub completed: bool,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join("manifest.toml");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        toml::from_str(&text).map_err(|e| Error::ConfigParse { path: p.display().to_string(), message: e.to_string() })
    }
}

/// Everything a finished run wrote, held in memory.
#[derive(Debug, Clone)]
pub struct ExperimentRecord {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub metrics: Vec<IterationRow>,
    pub evaluations: Vec<EvalRow>,
}

impl ExperimentRecord {
    /// `(iteration, mean success over tasks)` for every evaluation.
    pub fn success_curve(&self) -> Vec<(usize, f64)> {
        let mut by_iter: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &self.evaluations {
            let e = by_iter.entry(r.iteration).or_default();
            e.0 += r.success;
            e.1 += 1;
        }
        by_iter.into_iter().map(|(i, (s, n))| (i, s / n as f64)).collect()
    }

    /// Per-task evaluations at one iteration, in task order.
    pub fn evaluations_at(&self, iteration: usize) -> Vec<&EvalRow> {
        self.evaluations.iter().filter(|r| r.iteration == iteration).collect()
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let manifest = RunManifest::load(run_dir)?;
        let metrics = read_csv(&run_dir.join("metrics.csv"))?;
        let evaluations = read_csv(&run_dir.join("evaluations.csv"))?;
        Ok(Self { run_dir: run_dir.to_path_buf(), manifest, metrics, evaluations })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: ExperimentRecord,
    pub agent: ActorCritic,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(|e| Error::Report(format!("{}: {e}", path.display())))
}

/// Per-task deterministic evaluation result (means over episodes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub task: String,
    pub success: f64,
    pub pos_error: f64,
    pub ori_error: f64,
}

/// Mean-action rollouts, `episodes` per task. Reset draws depend only on
/// `(seed, task position, episode)`, so results are comparable across
/// iterations, checkpoints and noise levels.
pub fn evaluate_agent(
    agent: &ActorCritic,
    tasks: &[TaskSpec],
    cfg: &RunConfig,
    episodes: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<TaskEvaluation>> {
    let jobs: Vec<EpisodeJob<'_>> = tasks
        .iter()
        .enumerate()
        .flat_map(|(k, task)| {
            (0..episodes).map(move |e| EpisodeJob { task, task_index: k, key: vec![seed, EVAL_KEY, k as u64, e as u64] })
        })
        .collect();
    let records = run_episodes(
        agent,
        &agent.normalizer,
        &jobs,
        &cfg.plant,
        &cfg.env,
        ActionMode::Deterministic,
        noise_std,
        RecordFlags::default(),
    )?;
    let mut out: Vec<TaskEvaluation> = tasks
        .iter()
        .map(|t| TaskEvaluation { task: t.id.clone(), success: 0.0, pos_error: 0.0, ori_error: 0.0 })
        .collect();
    for rec in &records {
        let r = rec.result();
        let e = &mut out[rec.task_index];
        e.success += r.success;
        e.pos_error += r.pos_error;
        e.ori_error += r.ori_error;
    }
    let n = episodes.max(1) as f64;
    for e in &mut out {
        e.success /= n;
        e.pos_error /= n;
        e.ori_error /= n;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEvalRow {
    pub noise_mm: f64,
    pub task: String,
    pub success: f64,
    pub pos_error: f64,
    pub ori_error: f64,
}

/// Evaluation sweep of a saved checkpoint over observation-noise levels
/// (meters).
pub fn evaluate(
    ckpt: &Path,
    tasks: &[TaskSpec],
    cfg: &RunConfig,
    episodes: usize,
    noise_levels: &[f64],
    seed: u64,
) -> Result<Vec<NoiseEvalRow>> {
    let agent = checkpoint::load_agent(ckpt)?;
    evaluate_noise_sweep(&agent, tasks, cfg, episodes, noise_levels, seed)
}

pub fn evaluate_noise_sweep(
    agent: &ActorCritic,
    tasks: &[TaskSpec],
    cfg: &RunConfig,
    episodes: usize,
    noise_levels: &[f64],
    seed: u64,
) -> Result<Vec<NoiseEvalRow>> {
    let mut rows = Vec::new();
    for &noise in noise_levels {
        for e in evaluate_agent(agent, tasks, cfg, episodes, noise, seed)? {
            rows.push(NoiseEvalRow {
                noise_mm: noise * 1000.0,
                task: e.task,
                success: e.success,
                pos_error: e.pos_error,
                ori_error: e.ori_error,
            });
        }
    }
    Ok(rows)
}

fn env_dims(cfg: &RunConfig) -> (usize, usize) {
    (ObservationSpec::new(&cfg.plant, &cfg.env).dim(), cfg.plant.action_dim())
}

fn fresh_agent(cfg: &RunConfig, seed: u64) -> ActorCritic {
    let (od, ad) = env_dims(cfg);
    ActorCritic::new(od, ad, &cfg.ppo.hidden, cfg.ppo.init_log_std, &mut stream_rng(&[seed, 0x494E_4954]))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

struct RunWriter {
    dir: PathBuf,
    manifest: RunManifest,
    metrics: Vec<IterationRow>,
    evaluations: Vec<EvalRow>,
    started: Instant,
}

impl RunWriter {
    fn create(dir: &Path, cfg: &RunConfig, kind: RunKind, seed: u64, tasks: &[TaskSpec]) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let snap = dir.join("config.snapshot");
        fs::write(&snap, cfg.canonical()).map_err(|e| Error::io(format!("writing {}", snap.display()), e))?;
        let manifest = RunManifest {
            kind,
            config_hash: cfg.hash(),
            seed,
            task_ids: tasks.iter().map(|t| t.id.clone()).collect(),
            prior: None,
            prior_kind: None,
            checkpoints: Vec::new(),
            best_checkpoint: None,
            best_iteration: 0,
            best_success: 0.0,
            final_checkpoint: None,
            iterations_completed: 0,
            completed: false,
            wall_clock_secs: 0.0,
        };
        let w = Self { dir: dir.to_path_buf(), manifest, metrics: Vec::new(), evaluations: Vec::new(), started: Instant::now() };
        w.flush()?;
        Ok(w)
    }

    fn save(&mut self, agent: &ActorCritic, name: &str, iteration: usize) -> Result<String> {
        let rel = format!("checkpoints/{name}.ckpt");
        let m = CheckpointManifest {
            kind: self.manifest.kind.name().to_string(),
            config_hash: self.manifest.config_hash.clone(),
            iteration,
            seed: self.manifest.seed,
            task_ids: self.manifest.task_ids.clone(),
        };
        checkpoint::save_agent(&self.dir.join(&rel), agent, &m)?;
        if !self.manifest.checkpoints.contains(&rel) {
            self.manifest.checkpoints.push(rel.clone());
        }
        Ok(rel)
    }

    fn flush(&self) -> Result<()> {
        write_csv(&self.dir.join("metrics.csv"), &self.metrics)?;
        write_csv(&self.dir.join("evaluations.csv"), &self.evaluations)?;
        let mut m = self.manifest.clone();
        m.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let text = toml::to_string(&m).map_err(|e| Error::Report(e.to_string()))?;
        let p = self.dir.join("manifest.toml");
        fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    }

    fn finish(mut self) -> Result<ExperimentRecord> {
        self.manifest.completed = true;
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        self.flush()?;
        Ok(ExperimentRecord { run_dir: self.dir, manifest: self.manifest, metrics: self.metrics, evaluations: self.evaluations })
    }
}

struct LoopSpec<'a> {
    kind: RunKind,
    max_iters: usize,
    milestones: &'a [usize],
    prior: Option<(String, String)>,
}

#[derive(Default)]
struct Best {
    success: Option<f64>,
    /// Iteration of the most recent best-success checkpoint.
    saved: Option<usize>,
}

/// Evaluates, records rows, saves a checkpoint on a new best mean success,
/// and reports whether every task is solved.
fn eval_step(
    run: &mut RunWriter,
    best: &mut Best,
    agent: &ActorCritic,
    tasks: &[TaskSpec],
    cfg: &RunConfig,
    seed: u64,
    it: usize,
) -> Result<bool> {
    let wf = &cfg.workflow;
    let evals = evaluate_agent(agent, tasks, cfg, wf.eval_episodes, 0.0, seed)?;
    let m = mean(evals.iter().map(|e| e.success));
    let all_solved = evals.iter().all(|e| e.success >= wf.solve_threshold);
    run.evaluations.extend(evals.into_iter().map(|e| EvalRow {
        iteration: it,
        task: e.task,
        success: e.success,
        pos_error: e.pos_error,
        ori_error: e.ori_error,
    }));
    if best.success.map_or(true, |b| m > b) {
        best.success = Some(m);
        let rel = run.save(agent, &format!("iter_{it}"), it)?;
        run.manifest.best_checkpoint = Some(rel);
        run.manifest.best_iteration = it;
        run.manifest.best_success = m;
        best.saved = Some(it);
    }
    Ok(all_solved)
}

fn ppo_loop(
    mut agent: ActorCritic,
    tasks: &[TaskSpec],
    cfg: &RunConfig,
    seed: u64,
    spec: LoopSpec<'_>,
    run_dir: &Path,
) -> Result<TrainOutcome> {
    if tasks.is_empty() {
        return Err(Error::EmptySuite);
    }
    let (od, ad) = env_dims(cfg);
    agent.check_dims(od, ad)?;
    let wf = &cfg.workflow;
    let mut run = RunWriter::create(run_dir, cfg, spec.kind, seed, tasks)?;
    if let Some((p, k)) = spec.prior {
        run.manifest.prior = Some(p);
        run.manifest.prior_kind = Some(k);
    }
    let mut opt = PpoOptimizer::new(&agent, cfg.ppo.adam_lr);
    let mut best = Best::default();

    eval_step(&mut run, &mut best, &agent, tasks, cfg, seed, 0)?;
    if spec.milestones.contains(&0) && best.saved != Some(0) {
        run.save(&agent, "iter_0", 0)?;
    }
    let mut it = 0;
    while it < spec.max_iters {
        it += 1;
        let collect_seed: u64 = stream_rng(&[seed, it as u64, 0x434F_4C4C]).gen();
        let batch = collect_rollouts(&mut agent, tasks, &cfg.plant, &cfg.env, &cfg.ppo, collect_seed)?;
        let st = ppo_update(&mut agent, &mut opt, &batch, &cfg.ppo, seed, it)?;
        run.metrics.push(IterationRow {
            iteration: it,
            samples: batch.len(),
            episodes: batch.episodes.len(),
            mean_return: batch.mean_return(),
            train_success: batch.mean_success(),
            train_pos_error: batch.mean_pos_error(),
            train_ori_error: batch.mean_ori_error(),
            policy_loss: st.policy_loss,
            value_loss: st.value_loss,
            entropy: st.entropy,
            approx_kl: st.approx_kl,
            clip_fraction: st.clip_fraction,
        });
        run.manifest.iterations_completed = it;
        let mut solved = false;
        if it % wf.eval_every == 0 || it == spec.max_iters {
            solved = eval_step(&mut run, &mut best, &agent, tasks, cfg, seed, it)?;
            run.flush()?;
        }
        if spec.milestones.contains(&it) && best.saved != Some(it) {
            run.save(&agent, &format!("iter_{it}"), it)?;
        }
        if solved && wf.stop_when_solved {
            break;
        }
    }
    let final_rel = if best.saved == Some(it) || spec.milestones.contains(&it) {
        format!("checkpoints/iter_{it}.ckpt")
    } else {
        run.save(&agent, &format!("iter_{it}"), it)?
    };
    run.manifest.final_checkpoint = Some(final_rel);
    let record = run.finish()?;
    Ok(TrainOutcome { record, agent })
}

/// Single-task PPO from a fresh initialization.
pub fn train_expert(task: &TaskSpec, cfg: &RunConfig, seed: u64, max_iters: usize, run_dir: &Path) -> Result<TrainOutcome> {
    task.check(&cfg.plant)?;
    let spec = LoopSpec { kind: RunKind::Expert, max_iters, milestones: &[], prior: None };
    ppo_loop(fresh_agent(cfg, seed), std::slice::from_ref(task), cfg, seed, spec, run_dir)
}

/// Multi-task PPO over `tasks` with round-robin episode allocation;
/// checkpoints are written at every milestone.
pub fn train_prior(
    tasks: &[TaskSpec],
    cfg: &RunConfig,
    seed: u64,
    max_iters: usize,
    milestones: &[usize],
    run_dir: &Path,
) -> Result<TrainOutcome> {
    for t in tasks {
        t.check(&cfg.plant)?;
    }
    let spec = LoopSpec { kind: RunKind::Prior, max_iters, milestones, prior: None };
    ppo_loop(fresh_agent(cfg, seed), tasks, cfg, seed, spec, run_dir)
}

/// Loads a checkpoint as the starting point for `task`: networks are copied,
/// the normalizer is frozen and the exploration scale is reset.
pub fn load_prior(prior: &Path, cfg: &RunConfig) -> Result<(ActorCritic, String)> {
    let mut agent = checkpoint::load_agent(prior)?;
    let prior_manifest = checkpoint::load_manifest(prior).ok();
    let (od, ad) = env_dims(cfg);
    if agent.check_dims(od, ad).is_err() {
        let prior_cfg = prior_manifest.as_ref().map_or("unknown".to_string(), |m| m.config_hash.clone());
        return Err(Error::DimensionMismatch(format!(
            "prior {} (config {}) maps {} -> {}, but run config {} needs {} -> {}",
            prior.display(),
            prior_cfg,
            agent.obs_dim(),
            agent.act_dim(),
            cfg.hash(),
            od,
            ad
        )));
    }
    agent.normalizer.frozen = true;
    agent.policy.reset_log_std(FINETUNE_LOG_STD);
    let kind = prior_manifest.map_or_else(|| "unknown".to_string(), |m| m.kind);
    Ok((agent, kind))
}

pub fn finetune(prior: &Path, task: &TaskSpec, cfg: &RunConfig, seed: u64, max_iters: usize, run_dir: &Path) -> Result<TrainOutcome> {
    task.check(&cfg.plant)?;
    let (agent, kind) = load_prior(prior, cfg)?;
    let spec = LoopSpec {
        kind: RunKind::Finetune,
        max_iters,
        milestones: &[],
        prior: Some((prior.display().to_string(), kind)),
    };
    ppo_loop(agent, std::slice::from_ref(task), cfg, seed, spec, run_dir)
}

/// Mean-squared error between `net(obs)` and `targets`, averaged over every
/// output element, and its gradient written into `grad`.
pub fn mse_loss_and_grad(
    net: &Mlp,
    obs: &[f64],
    targets: &[f64],
    batch: usize,
    grad: &mut [f64],
    cache: &mut ForwardCache,
) -> Result<f64> {
    net.forward_cached(obs, batch, cache)?;
    let out = cache.output();
    if out.len() != targets.len() {
        return Err(Error::DimensionMismatch(format!("{} outputs vs {} targets", out.len(), targets.len())));
    }
    let n = out.len() as f64;
    let diff: Vec<f64> = out.iter().zip(targets).map(|(o, t)| o - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let upstream: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
    grad.iter_mut().for_each(|g| *g = 0.0);
    net.backward(cache, &upstream, grad);
    Ok(loss)
}

/// Observation/action pairs from mean-action rollouts of one expert.
#[derive(Debug, Clone, Default)]
pub struct Demonstrations {
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Raw observations, row-major.
    pub obs: Vec<f64>,
    /// Executed (clamped) actions, row-major.
    pub actions: Vec<f64>,
}

impl Demonstrations {
    pub fn len(&self) -> usize {
        self.actions.len() / self.act_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Rolls out `agent` on `task` until at least `samples` pairs are recorded.
pub fn collect_demonstrations(
    agent: &ActorCritic,
    task: &TaskSpec,
    cfg: &RunConfig,
    samples: usize,
    key: &[u64],
) -> Result<Demonstrations> {
    let episodes = samples.div_ceil(task.horizon.max(1));
    let jobs: Vec<EpisodeJob<'_>> = (0..episodes)
        .map(|e| {
            let mut k = key.to_vec();
            k.push(e as u64);
            EpisodeJob { task, task_index: 0, key: k }
        })
        .collect();
    let flags = RecordFlags { raw: true, ..Default::default() };
    let records = run_episodes(agent, &agent.normalizer, &jobs, &cfg.plant, &cfg.env, ActionMode::Deterministic, 0.0, flags)?;
    let mut d = Demonstrations { obs_dim: agent.obs_dim(), act_dim: agent.act_dim(), ..Default::default() };
    for r in records {
        d.obs.extend_from_slice(&r.raw_obs);
        d.actions.extend_from_slice(&r.executed);
    }
    Ok(d)
}

/// Per-sample mean-squared action error of a policy network on raw data.
pub fn action_mse(agent: &ActorCritic, data: &Demonstrations) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Ok(0.0);
    }
    let obs: Vec<f64> = data.obs.chunks_exact(data.obs_dim).flat_map(|r| agent.normalizer.normalize(r)).collect();
    let out = agent.policy.net.forward(&obs, n)?;
    Ok(out.iter().zip(&data.actions).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / out.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillRow {
    pub epoch: usize,
    pub mse: f64,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: ActorCritic,
    pub rows: Vec<DistillRow>,
    pub checkpoint: PathBuf,
    pub dataset_size: usize,
}

/// Trains a student on a pooled dataset. The student's normalizer is fit on
/// the pooled raw observations and frozen; only the policy network trains.
pub fn fit_student(
    student: &mut ActorCritic,
    data: &Demonstrations,
    lr: f64,
    batch: usize,
    epochs: usize,
    seed: u64,
) -> Result<Vec<DistillRow>> {
    let n = data.len();
    let (od, ad) = (data.obs_dim, data.act_dim);
    student.check_dims(od, ad)?;
    let mut norm = RunningNormalizer::new(od);
    data.obs.chunks_exact(od).for_each(|r| norm.update(r));
    norm.frozen = true;
    student.normalizer = norm;
    let mut x = vec![0.0; data.obs.len()];
    for (src, dst) in data.obs.chunks_exact(od).zip(x.chunks_exact_mut(od)) {
        student.normalizer.normalize_into(src, dst);
    }

    let net = &mut student.policy.net;
    let mut opt = Adadelta::new(net.n_params(), lr);
    let mut grad = vec![0.0; net.n_params()];
    let mut cache = ForwardCache::default();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rows = Vec::with_capacity(epochs);
    let mut mb_x = Vec::with_capacity(batch * od);
    let mut mb_y = Vec::with_capacity(batch * ad);
    for epoch in 0..epochs {
        idx.shuffle(&mut stream_rng(&[seed, DISTILL_KEY, epoch as u64]));
        let mut total = 0.0;
        for chunk in idx.chunks(batch) {
            mb_x.clear();
            mb_y.clear();
            for &i in chunk {
                mb_x.extend_from_slice(&x[i * od..(i + 1) * od]);
                mb_y.extend_from_slice(&data.actions[i * ad..(i + 1) * ad]);
            }
            let loss = mse_loss_and_grad(net, &mb_x, &mb_y, chunk.len(), &mut grad, &mut cache)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: epoch, detail: "distillation mse".into() });
            }
            total += loss * chunk.len() as f64;
            opt.step(&mut net.params, &grad);
        }
        rows.push(DistillRow { epoch: epoch + 1, mse: total / n.max(1) as f64 });
    }
    Ok(rows)
}

/// Behavior-cloning baseline: each expert is rolled out on its own task and
/// a fresh student regresses the pooled observation/action pairs.
pub fn distill(experts: &[(PathBuf, TaskSpec)], cfg: &RunConfig, seed: u64, run_dir: &Path) -> Result<DistillOutcome> {
    if experts.is_empty() {
        return Err(Error::InvalidConfig("distillation needs at least one expert".into()));
    }
    let wf = &cfg.workflow;
    let tasks: Vec<TaskSpec> = experts.iter().map(|(_, t)| t.clone()).collect();
    let mut run = RunWriter::create(run_dir, cfg, RunKind::Student, seed, &tasks)?;
    let mut pooled = Demonstrations::default();
    let mut first: Option<(&Path, usize, usize)> = None;
    for (i, (path, task)) in experts.iter().enumerate() {
        let agent = checkpoint::load_agent(path)?;
        match first {
            None => first = Some((path, agent.obs_dim(), agent.act_dim())),
            Some((p0, od, ad)) if (od, ad) != (agent.obs_dim(), agent.act_dim()) => {
                return Err(Error::DimensionMismatch(format!(
                    "expert {} maps {od} -> {ad} but expert {} maps {} -> {}",
                    p0.display(),
                    path.display(),
                    agent.obs_dim(),
                    agent.act_dim()
                )));
            }
            _ => {}
        }
        let d = collect_demonstrations(&agent, task, cfg, wf.distill_samples_per_expert, &[seed, DISTILL_KEY, i as u64])?;
        pooled.obs_dim = d.obs_dim;
        pooled.act_dim = d.act_dim;
        pooled.obs.extend_from_slice(&d.obs);
        pooled.actions.extend_from_slice(&d.actions);
    }
    let (od, ad) = (pooled.obs_dim, pooled.act_dim);
    let (eod, ead) = env_dims(cfg);
    if (od, ad) != (eod, ead) {
        return Err(Error::DimensionMismatch(format!(
            "experts map {od} -> {ad} but run config {} needs {eod} -> {ead}",
            cfg.hash()
        )));
    }
    let mut student = fresh_agent(cfg, seed);
    let rows = fit_student(&mut student, &pooled, wf.distill_lr, wf.distill_batch, wf.distill_epochs, seed)?;
    write_csv(&run_dir.join("metrics.csv"), &rows)?;
    let rel = run.save(&student, "student", wf.distill_epochs)?;
    run.manifest.final_checkpoint = Some(rel.clone());
    run.manifest.iterations_completed = wf.distill_epochs;
    run.manifest.completed = true;
    let started = run.started;
    let mut m = run.manifest.clone();
    m.wall_clock_secs = started.elapsed().as_secs_f64();
    let text = toml::to_string(&m).map_err(|e| Error::Report(e.to_string()))?;
    let p = run_dir.join("manifest.toml");
    fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    let _ = fs::remove_file(run_dir.join("evaluations.csv"));
    Ok(DistillOutcome { student, rows, checkpoint: run_dir.join(rel), dataset_size: pooled.len() })
}

/// Success curve of one (task, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRun {
    pub task: String,
    pub seed: u64,
    pub curve: Vec<(usize, f64)>,
}

impl TransferRun {
    pub fn from_record(rec: &ExperimentRecord) -> Result<Self> {
        if rec.manifest.task_ids.len() != 1 {
            return Err(Error::Report(format!(
                "{} covers {} tasks; transfer runs are single-task",
                rec.run_dir.display(),
                rec.manifest.task_ids.len()
            )));
        }
        Ok(Self { task: rec.manifest.task_ids[0].clone(), seed: rec.manifest.seed, curve: rec.success_curve() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskTransfer {
    pub task: String,
    pub seeds: usize,
    pub solved: bool,
    pub best_success: f64,
    pub iterations_to_solve: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSummary {
    pub method: String,
    pub tasks: Vec<TaskTransfer>,
    pub n_solved: usize,
    pub solved_fraction: f64,
    pub success_mean: f64,
    pub success_std: f64,
    pub iters_mean: Option<f64>,
    pub iters_std: Option<f64>,
    pub iters_median: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs.iter().copied());
    let v = mean(xs.iter().map(|x| (x - m) * (x - m)));
    (m, v.sqrt())
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Seed-averaged success curve. A run that ended early (after solving)
/// keeps its last evaluated value for later iterations.
fn averaged_curve(runs: &[&TransferRun]) -> Vec<(usize, f64)> {
    let mut iters: Vec<usize> = runs.iter().flat_map(|r| r.curve.iter().map(|c| c.0)).collect();
    iters.sort_unstable();
    iters.dedup();
    iters
        .into_iter()
        .map(|it| {
            let vals = runs.iter().map(|r| {
                r.curve.iter().take_while(|c| c.0 <= it).last().map_or(0.0, |c| c.1)
            });
            (it, mean(vals))
        })
        .collect()
}

/// Per-task solve statistics for one method. Seeds of the same task are
/// combined by averaging their success curves; a task is solved at the first
/// evaluated iteration where that average reaches `threshold`. Aggregate
/// spreads are population standard deviations; iteration statistics cover
/// solved tasks only.
pub fn summarize_method(method: &str, runs: &[TransferRun], threshold: f64) -> TransferSummary {
    let mut by_task: BTreeMap<&str, Vec<&TransferRun>> = BTreeMap::new();
    for r in runs {
        by_task.entry(r.task.as_str()).or_default().push(r);
    }
    let tasks: Vec<TaskTransfer> = by_task
        .into_iter()
        .map(|(task, mut rs)| {
            // fixed summation order so the result does not depend on input order
            rs.sort_by(|a, b| {
                a.seed.cmp(&b.seed).then_with(|| {
                    a.curve
                        .iter()
                        .zip(&b.curve)
                        .map(|(x, y)| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)))
                        .find(|o| o.is_ne())
                        .unwrap_or(a.curve.len().cmp(&b.curve.len()))
                })
            });
            let curve = averaged_curve(&rs);
            let best = curve.iter().map(|c| c.1).fold(0.0, f64::max);
            let its = curve.iter().find(|c| c.1 >= threshold).map(|c| c.0);
            TaskTransfer { task: task.to_string(), seeds: rs.len(), solved: its.is_some(), best_success: best, iterations_to_solve: its }
        })
        .collect();
    let n_solved = tasks.iter().filter(|t| t.solved).count();
    let best: Vec<f64> = tasks.iter().map(|t| t.best_success).collect();
    let (success_mean, success_std) = mean_std(&best);
    let its: Vec<f64> = tasks.iter().filter_map(|t| t.iterations_to_solve.map(|i| i as f64)).collect();
    let (im, is) = mean_std(&its);
    TransferSummary {
        method: method.to_string(),
        n_solved,
        solved_fraction: if tasks.is_empty() { 0.0 } else { n_solved as f64 / tasks.len() as f64 },
        success_mean,
        success_std,
        iters_mean: (!its.is_empty()).then_some(im),
        iters_std: (!its.is_empty()).then_some(is),
        iters_median: median(&its),
        tasks,
    }
}

/// Summaries for each `(method, runs)` group; every group must cover the
/// same task set.
pub fn transfer_report(methods: &[(String, Vec<TransferRun>)], threshold: f64) -> Result<Vec<TransferSummary>> {
    fn task_set(runs: &[TransferRun]) -> Vec<&str> {
        let mut v: Vec<&str> = runs.iter().map(|r| r.task.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
    if let Some((m0, r0)) = methods.first() {
        let reference = task_set(r0);
        for (m, r) in &methods[1..] {
            if task_set(r) != reference {
                return Err(Error::Report(format!("methods {m0} and {m} cover different task sets")));
            }
        }
    }
    Ok(methods.iter().map(|(m, r)| summarize_method(m, r, threshold)).collect())
}

/// Median iterations-to-solve of `a` and `b` restricted to tasks both solve.
pub fn common_solved_medians(a: &TransferSummary, b: &TransferSummary) -> Option<(f64, f64)> {
    let bi: BTreeMap<&str, usize> =
        b.tasks.iter().filter_map(|t| t.iterations_to_solve.map(|i| (t.task.as_str(), i))).collect();
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for t in &a.tasks {
        if let (Some(i), Some(j)) = (t.iterations_to_solve, bi.get(t.task.as_str())) {
            xa.push(i as f64);
            xb.push(*j as f64);
        }
    }
    Some((median(&xa)?, median(&xb)?))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v}"))
}

pub fn transfer_tasks_csv(summaries: &[TransferSummary]) -> String {
    let mut s = String::from("method,task,seeds,solved,best_success,iterations_to_solve\n");
    for m in summaries {
        for t in &m.tasks {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.method,
                t.task,
                t.seeds,
                t.solved,
                t.best_success,
                t.iterations_to_solve.map_or_else(String::new, |i| i.to_string())
            ));
        }
    }
    s
}

pub fn transfer_summary_csv(summaries: &[TransferSummary]) -> String {
    let mut s = String::from(
        "method,tasks,solved,solved_fraction,success_mean,success_std,iters_mean,iters_std,iters_median\n",
    );
    for m in summaries {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            m.method,
            m.tasks.len(),
            m.n_solved,
            m.solved_fraction,
            m.success_mean,
            m.success_std,
            fmt_opt(m.iters_mean),
            fmt_opt(m.iters_std),
            fmt_opt(m.iters_median)
        ));
    }
    s
}

pub fn transfer_table(summaries: &[TransferSummary]) -> String {
    let mut s = format!("{:<12} {:>14} {:>16} {:>20}\n", "method", "solved", "success", "iters to solve");
    for m in summaries {
        let solved = format!("{:.0}% ({}/{})", 100.0 * m.solved_fraction, m.n_solved, m.tasks.len());
        let success = format!("{:.2} ± {:.2}", m.success_mean, m.success_std);
        let iters = match (m.iters_mean, m.iters_std) {
            (Some(a), Some(b)) => format!("{a:.0} ± {b:.0}"),
            _ => "-".to_string(),
        };
        s.push_str(&format!("{:<12} {:>14} {:>16} {:>20}\n", m.method, solved, success, iters));
    }
    s
}
