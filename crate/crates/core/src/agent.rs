//! Actor-critic bundle and the lockstep episode runner shared by rollout
//! collection, evaluation, distillation data collection and synergy probing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{observe_into, EnvConfig, EpisodeResult, ObservationSpec};
use crate::error::{Error, Result};
use crate::nn::{gaussian_log_prob, ForwardCache, GaussianPolicy, Mlp, RunningNormalizer};
use crate::plant::{plant_step, Control, MusclePlantConfig};
use crate::tasks::TaskSpec;

/// Policy, value function and the observation normalizer they share.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub normalizer: RunningNormalizer,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: &[usize], init_log_std: f64, rng: &mut R) -> Self {
        let mut pdims = vec![obs_dim];
        pdims.extend_from_slice(hidden);
        let mut vdims = pdims.clone();
        pdims.push(act_dim);
        vdims.push(1);
        let policy = GaussianPolicy::init(&pdims, init_log_std, rng);
        let value = Mlp::init(&vdims, 1.0, rng);
        Self { policy, value, normalizer: RunningNormalizer::new(obs_dim) }
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.net.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.policy.net.output_dim()
    }

    pub fn check_dims(&self, obs_dim: usize, act_dim: usize) -> Result<()> {
        if self.obs_dim() != obs_dim || self.act_dim() != act_dim || self.value.input_dim() != obs_dim {
            return Err(Error::DimensionMismatch(format!(
                "agent maps {} -> {} but the environment needs {} -> {}",
                self.obs_dim(),
                self.act_dim(),
                obs_dim,
                act_dim
            )));
        }
        Ok(())
    }
}

/// Deterministic RNG stream derived from a key path (splitmix64 mixing).
pub fn stream_rng(key: &[u64]) -> ChaCha8Rng {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &k in key {
        h ^= k.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Sample from the Gaussian policy.
    Stochastic,
    /// Use the policy mean.
    Deterministic,
}

/// One episode to run: which task, and the key of its RNG streams.
#[derive(Debug, Clone)]
pub struct EpisodeJob<'a> {
    pub task: &'a TaskSpec,
    pub task_index: usize,
    pub key: Vec<u64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RecordFlags {
    /// Normalized observations, sampled actions, log-probs and values.
    pub transitions: bool,
    /// Raw (unnormalized) observations and executed (clamped) actions.
    pub raw: bool,
    /// Muscle activations after every step.
    pub activations: bool,
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeRecord {
    pub task_index: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub raw_obs: Vec<f64>,
    pub executed: Vec<f64>,
    pub activations: Vec<Vec<f64>>,
    pub result: Option<EpisodeResult>,
}

impl EpisodeRecord {
    pub fn result(&self) -> &EpisodeResult {
        self.result.as_ref().expect("episode finished")
    }
}

/// Runs all `jobs` in lockstep, batching network evaluations across the
/// live episodes. Each job owns two RNG streams derived from its key: one
/// for the reset and action sampling, one for observation noise, so the
/// noise level never changes the reset or action draws.
#[allow(clippy::too_many_arguments)]
pub fn run_episodes(
    agent: &ActorCritic,
    normalizer: &RunningNormalizer,
    jobs: &[EpisodeJob<'_>],
    plant: &MusclePlantConfig,
    env_cfg: &EnvConfig,
    mode: ActionMode,
    noise_std: f64,
    flags: RecordFlags,
) -> Result<Vec<EpisodeRecord>> {
    let obs_dim = ObservationSpec::new(plant, env_cfg).dim();
    let act_dim = plant.action_dim();
    agent.check_dims(obs_dim, act_dim)?;

    let mut rngs: Vec<ChaCha8Rng> = jobs.iter().map(|j| stream_rng(&j.key)).collect();
    let mut noise_rngs: Vec<ChaCha8Rng> = jobs
        .iter()
        .map(|j| {
            let mut k = j.key.clone();
            k.push(0x6E6F_6973_65);
            stream_rng(&k)
        })
        .collect();
    let mut states: Vec<_> = jobs
        .iter()
        .zip(&mut rngs)
        .map(|(j, rng)| crate::env::reset(j.task, plant, rng))
        .collect();
    let mut records: Vec<EpisodeRecord> = jobs
        .iter()
        .map(|j| EpisodeRecord { task_index: j.task_index, ..Default::default() })
        .collect();
    let mut traces: Vec<Vec<crate::env::ObjectPose>> =
        states.iter().map(|s| vec![crate::env::ObjectPose::of(s)]).collect();

    let max_h = jobs.iter().map(|j| j.task.horizon).max().unwrap_or(0);
    let mut raw = Vec::with_capacity(obs_dim);
    let mut batch_obs = Vec::new();
    let mut live = Vec::with_capacity(jobs.len());
    let mut pcache = ForwardCache::default();
    let mut vcache = ForwardCache::default();
    let mut raw_rows: Vec<Vec<f64>> = vec![Vec::new(); jobs.len()];

    for t in 0..max_h {
        live.clear();
        batch_obs.clear();
        for (i, job) in jobs.iter().enumerate() {
            if t >= job.task.horizon {
                continue;
            }
            observe_into(&mut raw, &states[i], job.task, env_cfg.goal_window, noise_std, &mut noise_rngs[i]);
            let start = batch_obs.len();
            batch_obs.resize(start + obs_dim, 0.0);
            normalizer.normalize_into(&raw, &mut batch_obs[start..]);
            raw_rows[i].clear();
            raw_rows[i].extend_from_slice(&raw);
            live.push(i);
        }
        let b = live.len();
        agent.policy.net.forward_cached(&batch_obs, b, &mut pcache)?;
        let need_values = flags.transitions;
        if need_values {
            agent.value.forward_cached(&batch_obs, b, &mut vcache)?;
        }
        let means = pcache.output();
        for (row, &i) in live.iter().enumerate() {
            let mean = &means[row * act_dim..(row + 1) * act_dim];
            let action: Vec<f64> = match mode {
                ActionMode::Deterministic => mean.to_vec(),
                ActionMode::Stochastic => mean
                    .iter()
                    .zip(&agent.policy.log_std)
                    .map(|(m, ls)| {
                        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rngs[i]);
                        m + ls.exp() * z
                    })
                    .collect(),
            };
            let control = Control::from_action(&action, plant.n_muscles);
            let rec = &mut records[i];
            if flags.transitions {
                rec.obs.extend_from_slice(&batch_obs[row * obs_dim..(row + 1) * obs_dim]);
                rec.log_probs.push(gaussian_log_prob(mean, &agent.policy.log_std, &action));
                rec.values.push(vcache.output()[row]);
                rec.actions.extend_from_slice(&action);
            }
            if flags.raw {
                rec.raw_obs.extend_from_slice(&raw_rows[i]);
                rec.executed.extend_from_slice(&control.u);
                rec.executed.push(control.grip);
            }
            let task = jobs[i].task;
            let next = plant_step(&states[i], &control, plant);
            let r = crate::env::reward(&next, task, t, &env_cfg.reward, plant.table_y);
            rec.rewards.push(r);
            if flags.activations {
                rec.activations.push(next.a.clone());
            }
            traces[i].push(crate::env::ObjectPose::of(&next));
            states[i] = next;
        }
    }

    for (i, job) in jobs.iter().enumerate() {
        let trace = std::mem::take(&mut traces[i]);
        let (success, pos_error, ori_error) = crate::env::episode_metrics(&trace, job.task)?;
        let rec = &mut records[i];
        rec.result = Some(EpisodeResult {
            success,
            pos_error,
            ori_error,
            ret: rec.rewards.iter().sum(),
            trace,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::JitterConfig;

    #[test]
    fn stream_rng_depends_on_every_key_component() {
        let a: u64 = stream_rng(&[1, 2, 3]).gen();
        let b: u64 = stream_rng(&[1, 2, 3]).gen();
        let c: u64 = stream_rng(&[1, 2, 4]).gen();
        let d: u64 = stream_rng(&[2, 1, 3]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn lockstep_matches_single_episode_runs() {
        let plant = MusclePlantConfig::default();
        let env_cfg = EnvConfig::default();
        let j = JitterConfig::default();
        let t1 = TaskSpec::lift("a", [0.45, 0.0, 0.0], 0.2, 100, &j, &plant).unwrap();
        let t2 = TaskSpec::rotate("b", [0.4, 0.0, 0.1], 0.5, 60, &j, &plant).unwrap();
        let obs_dim = ObservationSpec::new(&plant, &env_cfg).dim();
        let agent = ActorCritic::new(obs_dim, 9, &[16, 8], 0.5f64.ln(), &mut stream_rng(&[0]));
        let norm = RunningNormalizer::new(obs_dim);
        let jobs = vec![
            EpisodeJob { task: &t1, task_index: 0, key: vec![1] },
            EpisodeJob { task: &t2, task_index: 1, key: vec![2] },
        ];
        let flags = RecordFlags { transitions: true, ..Default::default() };
        let both = run_episodes(&agent, &norm, &jobs, &plant, &env_cfg, ActionMode::Stochastic, 0.0, flags).unwrap();
        for (k, job) in jobs.iter().enumerate() {
            let single =
                run_episodes(&agent, &norm, std::slice::from_ref(job), &plant, &env_cfg, ActionMode::Stochastic, 0.0, flags)
                    .unwrap();
            assert_eq!(single[0].rewards, both[k].rewards);
            assert_eq!(single[0].actions, both[k].actions);
            assert_eq!(single[0].rewards.len(), job.task.horizon);
        }
    }
}
