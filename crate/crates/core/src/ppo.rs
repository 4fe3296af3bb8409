//! Proximal Policy Optimization: multi-task rollout collection, GAE,
//! and the clipped-surrogate update.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::agent::{run_episodes, stream_rng, ActionMode, ActorCritic, EpisodeJob, RecordFlags};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::nn::{gaussian_entropy, Adam, ForwardCache};
use crate::plant::MusclePlantConfig;
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub samples_per_iter: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub clip: f64,
    pub batch: usize,
    pub epochs: usize,
    pub adam_lr: f64,
    /// Global gradient-norm cap per minibatch; `0` disables it.
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            samples_per_iter: 4096,
            gamma: 0.95,
            gae_lambda: 0.95,
            vf_coef: 0.5,
            ent_coef: 0.001,
            clip: 0.2,
            batch: 256,
            epochs: 5,
            adam_lr: 3e-4,
            max_grad_norm: 0.5,
            hidden: vec![256, 128],
            init_log_std: 0.5f64.ln(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("ppo: {m}")));
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1)");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.batch == 0 || self.samples_per_iter % self.batch != 0 {
            return bad("batch must divide samples_per_iter");
        }
        if !(self.adam_lr > 0.0) || self.max_grad_norm < 0.0 {
            return bad("adam_lr must be positive and max_grad_norm non-negative");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeSummary {
    pub task_index: usize,
    pub ret: f64,
    pub success: f64,
    pub pos_error: f64,
    pub ori_error: f64,
}

/// Flat per-step arrays, episode-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBatch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_prob_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub value_old: Vec<f64>,
    pub dones: Vec<bool>,
    pub task_ids: Vec<usize>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episodes: Vec<EpisodeSummary>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn mean_return(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.ret))
    }

    pub fn mean_success(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.success))
    }

    pub fn mean_pos_error(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.pos_error))
    }

    pub fn mean_ori_error(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.ori_error))
    }

    /// Episodes per task index.
    pub fn episode_counts(&self, n_tasks: usize) -> Vec<usize> {
        let mut c = vec![0; n_tasks];
        for e in &self.episodes {
            c[e.task_index] += 1;
        }
        c
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Round-robin episode allocation: task indices in order, until the summed
/// horizons reach `samples`.
pub fn allocate_episodes(tasks: &[TaskSpec], samples: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut steps = 0;
    let mut i = 0;
    while steps < samples {
        let k = i % tasks.len();
        out.push(k);
        steps += tasks[k].horizon.max(1);
        i += 1;
    }
    out
}

/// Collects full episodes round-robin across `tasks` until at least
/// `samples_per_iter` steps. Observations are normalized with the agent's
/// normalizer as it stood at the start of the call; afterwards every raw
/// observation is streamed into it in batch order (unless frozen). The
/// returned batch has advantages computed and normalized.
pub fn collect_rollouts(
    agent: &mut ActorCritic,
    tasks: &[TaskSpec],
    plant: &MusclePlantConfig,
    env_cfg: &EnvConfig,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<RolloutBatch> {
    if tasks.is_empty() {
        return Err(Error::InvalidConfig("collect_rollouts needs at least one task".into()));
    }
    let alloc = allocate_episodes(tasks, cfg.samples_per_iter);
    let mut per_task = vec![0u64; tasks.len()];
    let jobs: Vec<EpisodeJob> = alloc
        .iter()
        .map(|&k| {
            let ep = per_task[k];
            per_task[k] += 1;
            EpisodeJob { task: &tasks[k], task_index: k, key: vec![seed, k as u64, ep] }
        })
        .collect();
    let snapshot = agent.normalizer.clone();
    let flags = RecordFlags { transitions: true, raw: true, activations: false };
    let records = run_episodes(agent, &snapshot, &jobs, plant, env_cfg, ActionMode::Stochastic, env_cfg.noise_std, flags)?;

    let obs_dim = agent.obs_dim();
    let act_dim = agent.act_dim();
    let mut batch = RolloutBatch { obs_dim, act_dim, ..Default::default() };
    for rec in &records {
        let n = rec.rewards.len();
        batch.obs.extend_from_slice(&rec.obs);
        batch.actions.extend_from_slice(&rec.actions);
        batch.log_prob_old.extend_from_slice(&rec.log_probs);
        batch.rewards.extend_from_slice(&rec.rewards);
        batch.value_old.extend_from_slice(&rec.values);
        batch.dones.extend((0..n).map(|t| t + 1 == n));
        batch.task_ids.extend(std::iter::repeat(rec.task_index).take(n));
        let r = rec.result();
        batch.episodes.push(EpisodeSummary {
            task_index: rec.task_index,
            ret: r.ret,
            success: r.success,
            pos_error: r.pos_error,
            ori_error: r.ori_error,
        });
        for row in rec.raw_obs.chunks_exact(obs_dim) {
            agent.normalizer.update(row);
        }
    }
    let (adv, ret) = compute_gae(&batch.rewards, &batch.value_old, &batch.dones, cfg.gamma, cfg.gae_lambda);
    batch.advantages = adv;
    batch.returns = ret;
    normalize_advantages(&mut batch.advantages);
    Ok(batch)
}

/// Generalized advantage estimation over concatenated episodes. `dones[t]`
/// marks the last step of an episode; the value after it bootstraps to 0.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n);
    assert_eq!(dones.len(), n);
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value * not_done - values[t];
        next_adv = delta + gamma * lambda * not_done * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to zero mean and unit population standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let m = adv.iter().sum::<f64>() / n;
    adv.iter_mut().for_each(|a| *a -= m);
    // second centering pass removes the rounding residue of the first
    let m2 = adv.iter().sum::<f64>() / n;
    adv.iter_mut().for_each(|a| *a -= m2);
    let sd = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        adv.iter_mut().for_each(|a| *a /= sd);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Gradients w.r.t. policy weights, log-std and value weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoGrads {
    pub policy: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value: Vec<f64>,
}

impl PpoGrads {
    pub fn zeros(agent: &ActorCritic) -> Self {
        Self {
            policy: vec![0.0; agent.policy.net.n_params()],
            log_std: vec![0.0; agent.policy.log_std.len()],
            value: vec![0.0; agent.value.n_params()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.policy.iter().chain(&self.log_std).chain(&self.value).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.policy.iter_mut().chain(&mut self.log_std).chain(&mut self.value).for_each(|g| *g *= s);
    }
}

/// A minibatch view: row-major observations and actions plus per-sample scalars.
pub struct Minibatch<'a> {
    pub obs: &'a [f64],
    pub actions: &'a [f64],
    pub log_prob_old: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

#[derive(Default)]
pub struct LossWorkspace {
    pcache: ForwardCache,
    vcache: ForwardCache,
    upstream: Vec<f64>,
    vupstream: Vec<f64>,
}

/// Total PPO loss `L = -E[min(rho A, clip(rho) A)] + c1 E[(v - R)^2] - c2 H`
/// on a minibatch, with its exact gradient written into `grads` (overwritten).
pub fn ppo_loss_and_grad(
    agent: &ActorCritic,
    mb: &Minibatch<'_>,
    cfg: &PpoConfig,
    grads: &mut PpoGrads,
    ws: &mut LossWorkspace,
) -> Result<LossTerms> {
    let b = mb.log_prob_old.len();
    let obs_dim = agent.obs_dim();
    let act_dim = agent.act_dim();
    agent.policy.net.forward_cached(mb.obs, b, &mut ws.pcache)?;
    agent.value.forward_cached(mb.obs, b, &mut ws.vcache)?;
    debug_assert_eq!(mb.obs.len(), b * obs_dim);

    let log_std = &agent.policy.log_std;
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let sum_log_std: f64 = log_std.iter().sum();
    let inv_b = 1.0 / b as f64;

    grads.policy.iter_mut().for_each(|g| *g = 0.0);
    grads.value.iter_mut().for_each(|g| *g = 0.0);
    grads.log_std.iter_mut().for_each(|g| *g = 0.0);
    ws.upstream.clear();
    ws.upstream.resize(b * act_dim, 0.0);
    ws.vupstream.clear();
    ws.vupstream.resize(b, 0.0);

    let means = ws.pcache.output();
    let values = ws.vcache.output();
    let (lo, hi) = (1.0 - cfg.clip, 1.0 + cfg.clip);
    let mut terms = LossTerms::default();
    for i in 0..b {
        let mean = &means[i * act_dim..(i + 1) * act_dim];
        let act = &mb.actions[i * act_dim..(i + 1) * act_dim];
        let mut quad = 0.0;
        for j in 0..act_dim {
            let d = act[j] - mean[j];
            quad += d * d * inv_var[j];
        }
        let lp = -0.5 * quad - sum_log_std - act_dim as f64 * half_log_2pi;
        let log_ratio = lp - mb.log_prob_old[i];
        let ratio = log_ratio.exp();
        let a = mb.advantages[i];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(lo, hi) * a;
        terms.policy -= unclipped.min(clipped) * inv_b;
        // d(-min)/d(lp): the unclipped branch is active unless the clipped one is strictly smaller
        let dlp = if unclipped <= clipped || (lo..=hi).contains(&ratio) { -unclipped * inv_b } else { 0.0 };
        if (ratio - 1.0).abs() > cfg.clip {
            terms.clip_fraction += inv_b;
        }
        terms.approx_kl += ((ratio - 1.0) - log_ratio) * inv_b;
        if dlp != 0.0 {
            for j in 0..act_dim {
                let d = act[j] - mean[j];
                ws.upstream[i * act_dim + j] = dlp * d * inv_var[j];
                grads.log_std[j] += dlp * (d * d * inv_var[j] - 1.0);
            }
        }
        let verr = values[i] - mb.returns[i];
        terms.value += verr * verr * inv_b;
        ws.vupstream[i] = cfg.vf_coef * 2.0 * verr * inv_b;
    }
    terms.entropy = gaussian_entropy(log_std);
    grads.log_std.iter_mut().for_each(|g| *g -= cfg.ent_coef);
    terms.total = terms.policy + cfg.vf_coef * terms.value - cfg.ent_coef * terms.entropy;
    if !terms.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: 0,
            detail: format!("policy={} value={} entropy={}", terms.policy, terms.value, terms.entropy),
        });
    }
    agent.policy.net.backward(&ws.pcache, &ws.upstream, &mut grads.policy);
    agent.value.backward(&ws.vcache, &ws.vupstream, &mut grads.value);
    Ok(terms)
}

/// Adam state for the three parameter groups; equivalent to a single Adam
/// over their concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoOptimizer {
    pub policy: Adam,
    pub log_std: Adam,
    pub value: Adam,
}

impl PpoOptimizer {
    pub fn new(agent: &ActorCritic, lr: f64) -> Self {
        Self {
            policy: Adam::new(agent.policy.net.n_params(), lr),
            log_std: Adam::new(agent.policy.log_std.len(), lr),
            value: Adam::new(agent.value.n_params(), lr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub minibatches: usize,
}

/// Runs `epochs` passes of shuffled minibatches (the remainder of each
/// shuffle is dropped) with one Adam step per minibatch.
pub fn ppo_update(
    agent: &mut ActorCritic,
    opt: &mut PpoOptimizer,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    seed: u64,
    iteration: usize,
) -> Result<UpdateStats> {
    let n = batch.len();
    let (od, ad) = (batch.obs_dim, batch.act_dim);
    let mut rng = stream_rng(&[seed, iteration as u64, 0x7570_6461_7465]);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut grads = PpoGrads::zeros(agent);
    let mut ws = LossWorkspace::default();
    let mb_size = cfg.batch.min(n);
    let mut obs = vec![0.0; mb_size * od];
    let mut act = vec![0.0; mb_size * ad];
    let mut lpo = vec![0.0; mb_size];
    let mut adv = vec![0.0; mb_size];
    let mut ret = vec![0.0; mb_size];
    let mut stats = UpdateStats::default();
    if mb_size == 0 {
        return Ok(stats);
    }
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks_exact(mb_size) {
            for (r, &i) in chunk.iter().enumerate() {
                obs[r * od..(r + 1) * od].copy_from_slice(&batch.obs[i * od..(i + 1) * od]);
                act[r * ad..(r + 1) * ad].copy_from_slice(&batch.actions[i * ad..(i + 1) * ad]);
                lpo[r] = batch.log_prob_old[i];
                adv[r] = batch.advantages[i];
                ret[r] = batch.returns[i];
            }
            let mb = Minibatch { obs: &obs, actions: &act, log_prob_old: &lpo, advantages: &adv, returns: &ret };
            let terms = ppo_loss_and_grad(agent, &mb, cfg, &mut grads, &mut ws).map_err(|e| match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { iteration, detail },
                other => other,
            })?;
            if cfg.max_grad_norm > 0.0 {
                let norm = grads.norm();
                if norm > cfg.max_grad_norm {
                    grads.scale(cfg.max_grad_norm / (norm + 1e-6));
                }
            }
            opt.policy.step(&mut agent.policy.net.params, &grads.policy);
            opt.log_std.step(&mut agent.policy.log_std, &grads.log_std);
            opt.value.step(&mut agent.value.params, &grads.value);
            agent.policy.clamp_log_std();

            stats.policy_loss += terms.policy;
            stats.value_loss += terms.value;
            stats.entropy += terms.entropy;
            stats.total_loss += terms.total;
            stats.clip_fraction += terms.clip_fraction;
            stats.approx_kl += terms.approx_kl;
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.total_loss /= k;
    stats.clip_fraction /= k;
    stats.approx_kl /= k;
    Ok(stats)
}
