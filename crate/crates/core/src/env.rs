//! MDP layer over the plant: goal-conditioned observations, the tracking
//! reward, progress metrics and episode bookkeeping.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{plant_step, wrap_angle, Control, MusclePlantConfig, PlantState};
use crate::tasks::TaskSpec;

/// Success threshold on object position error, meters.
pub const SUCCESS_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Tracking weight (lambda 1).
    pub w_track: f64,
    /// Lift bonus weight (lambda 2).
    pub w_lift: f64,
    /// Effort penalty weight (lambda 3).
    pub w_effort: f64,
    /// Position error scale, 1/m.
    pub alpha: f64,
    /// Orientation error scale, 1/rad.
    pub beta: f64,
    pub lift_height: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { w_track: 2.0, w_lift: 1.0, w_effort: 0.05, alpha: 10.0, beta: 1.0, lift_height: 0.02 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_track, self.w_lift, self.w_effort, self.alpha, self.beta, self.lift_height];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("reward weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub reward: RewardConfig,
    /// Number of upcoming waypoints in the observation.
    pub goal_window: usize,
    /// Object-position observation noise during training, meters.
    pub noise_std: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { reward: RewardConfig::default(), goal_window: 5, noise_std: 0.0 }
    }
}

/// Observation layout: `[q, qd, a, obj pose (3), obj vel (3), tau (4), goal window (3K)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservationSpec {
    pub n_joints: usize,
    pub n_muscles: usize,
    pub goal_window: usize,
}

impl ObservationSpec {
    pub fn new(plant: &MusclePlantConfig, env: &EnvConfig) -> Self {
        Self { n_joints: plant.n_joints, n_muscles: plant.n_muscles, goal_window: env.goal_window }
    }

    pub fn dim(&self) -> usize {
        2 * self.n_joints + self.n_muscles + 6 + 4 + 3 * self.goal_window
    }

    /// Offset of the object `[x, y, theta]` entries.
    pub fn object_pose_offset(&self) -> usize {
        2 * self.n_joints + self.n_muscles
    }

    pub fn encoding_offset(&self) -> usize {
        self.object_pose_offset() + 6
    }

    pub fn goal_offset(&self) -> usize {
        self.encoding_offset() + 4
    }
}

/// Sinusoidal timestep features `[sin 2pi t/T, cos 2pi t/T, sin 4pi t/T, cos 4pi t/T]`.
pub fn positional_encoding(t: usize, horizon: usize) -> [f64; 4] {
    let x = 2.0 * PI * t as f64 / horizon as f64;
    [x.sin(), x.cos(), (2.0 * x).sin(), (2.0 * x).cos()]
}

/// Writes the observation for `s` into `out`. Zero-mean Gaussian noise with
/// standard deviation `noise_std` perturbs the observed object position, which
/// also shifts the goal-window position offsets. No draws happen when
/// `noise_std == 0`.
pub fn observe_into<R: Rng + ?Sized>(
    out: &mut Vec<f64>,
    s: &PlantState,
    task: &TaskSpec,
    goal_window: usize,
    noise_std: f64,
    rng: &mut R,
) {
    out.clear();
    out.extend_from_slice(&s.q);
    out.extend_from_slice(&s.qd);
    out.extend_from_slice(&s.a);
    let mut p = s.obj_p;
    if noise_std > 0.0 {
        for v in &mut p {
            let z: f64 = StandardNormal.sample(rng);
            *v += noise_std * z;
        }
    }
    out.extend_from_slice(&[p[0], p[1], s.obj_theta, s.obj_v[0], s.obj_v[1], s.obj_w]);
    out.extend_from_slice(&positional_encoding(s.t, task.horizon));
    let tr = &task.trajectory;
    for k in 1..=goal_window {
        let i = (s.t + k).min(task.horizon);
        let target = tr.positions[i];
        out.push(target[0] - p[0]);
        out.push(target[1] - p[1]);
        out.push(wrap_angle(tr.orientations[i] - s.obj_theta));
    }
}

pub fn observe<R: Rng + ?Sized>(
    s: &PlantState,
    task: &TaskSpec,
    goal_window: usize,
    noise_std: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = Vec::new();
    observe_into(&mut out, s, task, goal_window, noise_std, rng);
    out
}

pub fn is_lifted(s: &PlantState, rc: &RewardConfig, table_y: f64) -> bool {
    s.obj_p[1] > table_y + rc.lift_height
}

/// Tracking reward for the post-step state `s_next` against waypoint `t + 1`.
pub fn reward(s_next: &PlantState, task: &TaskSpec, t: usize, rc: &RewardConfig, table_y: f64) -> f64 {
    let i = (t + 1).min(task.horizon);
    let target = task.trajectory.positions[i];
    let pos_err = ((s_next.obj_p[0] - target[0]).powi(2) + (s_next.obj_p[1] - target[1]).powi(2)).sqrt();
    let ori_err = wrap_angle(s_next.obj_theta - task.trajectory.orientations[i]).abs();
    let effort = s_next.a.iter().map(|a| a * a).sum::<f64>().sqrt();
    let lifted = if is_lifted(s_next, rc, table_y) { 1.0 } else { 0.0 };
    rc.w_track * (-rc.alpha * pos_err - rc.beta * ori_err).exp() + rc.w_lift * lifted - rc.w_effort * effort
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPose {
    pub p: [f64; 2],
    pub theta: f64,
}

impl ObjectPose {
    pub fn of(s: &PlantState) -> Self {
        Self { p: s.obj_p, theta: s.obj_theta }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub success: f64,
    pub pos_error: f64,
    pub ori_error: f64,
    pub ret: f64,
    pub trace: Vec<ObjectPose>,
}

/// Success fraction, mean position error and mean orientation error over the
/// `T` post-reset steps `t = 1..=T` of a length-`T+1` trace.
pub fn episode_metrics(trace: &[ObjectPose], task: &TaskSpec) -> Result<(f64, f64, f64)> {
    let want = task.horizon + 1;
    if trace.len() != want {
        return Err(Error::TraceLength { got: trace.len(), want });
    }
    let tr = &task.trajectory;
    let mut hits = 0usize;
    let mut pos = 0.0;
    let mut ori = 0.0;
    for t in 1..=task.horizon {
        let d = ((trace[t].p[0] - tr.positions[t][0]).powi(2) + (trace[t].p[1] - tr.positions[t][1]).powi(2)).sqrt();
        if d < SUCCESS_EPSILON {
            hits += 1;
        }
        pos += d;
        ori += wrap_angle(trace[t].theta - tr.orientations[t]).abs();
    }
    let n = task.horizon as f64;
    Ok((hits as f64 / n, pos / n, ori / n))
}

fn uniform_offset<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    let u: f64 = rng.gen();
    half_width * (2.0 * u - 1.0)
}

/// Samples an initial state from the task's reset distribution.
pub fn reset<R: Rng + ?Sized>(task: &TaskSpec, plant: &MusclePlantConfig, rng: &mut R) -> PlantState {
    let r = &task.reset;
    let obj = [
        r.object_start[0] + uniform_offset(rng, r.object_jitter[0]),
        r.object_start[1] + uniform_offset(rng, r.object_jitter[1]),
        r.object_start[2] + uniform_offset(rng, r.object_jitter[2]),
    ];
    let q = r
        .arm_start
        .iter()
        .zip(&plant.joint_limits)
        .map(|(q, lim)| (q + uniform_offset(rng, r.arm_jitter)).clamp(lim[0], lim[1]))
        .collect();
    PlantState::at_rest(q, plant.n_muscles, [obj[0], obj[1]], obj[2])
}

/// One episode of one task.
pub struct Env<'a> {
    pub plant: &'a MusclePlantConfig,
    pub cfg: &'a EnvConfig,
    pub task: &'a TaskSpec,
    pub state: PlantState,
    trace: Vec<ObjectPose>,
    rewards: Vec<f64>,
}

impl<'a> Env<'a> {
    pub fn new<R: Rng + ?Sized>(
        plant: &'a MusclePlantConfig,
        cfg: &'a EnvConfig,
        task: &'a TaskSpec,
        rng: &mut R,
    ) -> Self {
        let state = reset(task, plant, rng);
        let trace = vec![ObjectPose::of(&state)];
        Self { plant, cfg, task, state, trace, rewards: Vec::with_capacity(task.horizon) }
    }

    pub fn done(&self) -> bool {
        self.state.t >= self.task.horizon
    }

    pub fn observe_into<R: Rng + ?Sized>(&self, out: &mut Vec<f64>, noise_std: f64, rng: &mut R) {
        observe_into(out, &self.state, self.task, self.cfg.goal_window, noise_std, rng)
    }

    /// Applies a raw action (clamped to `[0, 1]` per channel) and returns the reward.
    pub fn step(&mut self, action: &[f64]) -> f64 {
        let control = Control::from_action(action, self.plant.n_muscles);
        let t = self.state.t;
        self.state = plant_step(&self.state, &control, self.plant);
        let r = reward(&self.state, self.task, t, &self.cfg.reward, self.plant.table_y);
        self.trace.push(ObjectPose::of(&self.state));
        self.rewards.push(r);
        r
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn trace(&self) -> &[ObjectPose] {
        &self.trace
    }

    pub fn result(&self) -> Result<EpisodeResult> {
        let (success, pos_error, ori_error) = episode_metrics(&self.trace, self.task)?;
        Ok(EpisodeResult {
            success,
            pos_error,
            ori_error,
            ret: self.rewards.iter().sum(),
            trace: self.trace.clone(),
        })
    }
}

/// Writes an episode trace as CSV. Row `t` carries the reward of the step
/// that produced state `t` (zero for the reset state).
pub fn write_trace_csv<W: Write>(mut w: W, task: &TaskSpec, trace: &[ObjectPose], rewards: &[f64]) -> std::io::Result<()> {
    writeln!(w, "t,obj_x,obj_y,obj_theta,desired_x,desired_y,desired_theta,reward")?;
    for (t, pose) in trace.iter().enumerate() {
        let i = t.min(task.horizon);
        let d = task.trajectory.positions[i];
        let r = if t == 0 { 0.0 } else { rewards.get(t - 1).copied().unwrap_or(0.0) };
        writeln!(
            w,
            "{t},{},{},{},{},{},{},{}",
            pose.p[0], pose.p[1], pose.theta, d[0], d[1], task.trajectory.orientations[i], r
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::JitterConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (MusclePlantConfig, TaskSpec) {
        let plant = MusclePlantConfig::default();
        let task = TaskSpec::lift("lift", [0.45, 0.0, 0.0], 0.2, 100, &JitterConfig::default(), &plant).unwrap();
        (plant, task)
    }

    fn on_target(task: &TaskSpec, plant: &MusclePlantConfig, t: usize) -> PlantState {
        let i = t + 1;
        let p = task.trajectory.positions[i];
        let mut s = PlantState::at_rest(task.reset.arm_start.clone(), plant.n_muscles, p, task.trajectory.orientations[i]);
        s.t = i;
        s
    }

    #[test]
    fn observation_dimension_and_encoding() {
        let (plant, task) = setup();
        let spec = ObservationSpec::new(&plant, &EnvConfig::default());
        assert_eq!(spec.dim(), 39);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = reset(&task, &plant, &mut rng);
        let o = observe(&s, &task, 5, 0.0, &mut rng);
        assert_eq!(o.len(), 39);
        let e = spec.encoding_offset();
        assert_eq!(&o[e..e + 4], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn quarter_period_encoding() {
        let enc = positional_encoding(25, 100);
        let expect = [1.0, 0.0, 0.0, -1.0];
        for (a, b) in enc.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_touches_only_object_position_entries() {
        let (plant, task) = setup();
        let spec = ObservationSpec::new(&plant, &EnvConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = reset(&task, &plant, &mut rng);
        let clean = observe(&s, &task, 5, 0.0, &mut rng);
        assert_eq!(clean, observe(&s, &task, 5, 0.0, &mut rng));
        let noisy = observe(&s, &task, 5, 0.01, &mut rng);
        let po = spec.object_pose_offset();
        let go = spec.goal_offset();
        for i in 0..spec.dim() {
            let pos_entry = i == po || i == po + 1 || (i >= go && (i - go) % 3 != 2);
            if pos_entry {
                assert_ne!(clean[i], noisy[i], "entry {i}");
            } else {
                assert_eq!(clean[i], noisy[i], "entry {i}");
            }
        }
    }

    #[test]
    fn reward_examples() {
        let (plant, task) = setup();
        let rc = RewardConfig::default();
        // on target, on the table (t = 0 target is at table height)
        let s = on_target(&task, &plant, 0);
        assert!((reward(&s, &task, 0, &rc, 0.0) - 2.0).abs() < 1e-12);
        // on target, lifted
        let s = on_target(&task, &plant, 50);
        assert!((reward(&s, &task, 50, &rc, 0.0) - 3.0).abs() < 1e-12);
        // hand-evaluated mixed case
        let mut s = on_target(&task, &plant, 50);
        s.obj_p[0] += 0.1;
        s.obj_theta += 0.5;
        s.a = vec![0.5; 8];
        let want = 2.0 * (-1.5f64).exp() + 1.0 - 0.05 * (8.0f64 * 0.25).sqrt();
        assert!((reward(&s, &task, 50, &rc, 0.0) - want).abs() < 1e-12);
    }

    #[test]
    fn reward_wraps_orientation() {
        let (plant, mut task) = setup();
        let d = 0.1;
        task.trajectory.orientations[100] = -PI + d;
        let mut s = on_target(&task, &plant, 99);
        s.obj_theta = PI - d;
        let rc = RewardConfig { w_lift: 0.0, w_effort: 0.0, ..Default::default() };
        let r = reward(&s, &task, 99, &rc, 0.0);
        assert!((r - 2.0 * (-2.0 * d).exp()).abs() < 1e-12);
    }

    #[test]
    fn metrics_examples() {
        let (_, task) = setup();
        let exact: Vec<ObjectPose> = task
            .trajectory
            .positions
            .iter()
            .zip(&task.trajectory.orientations)
            .map(|(p, th)| ObjectPose { p: *p, theta: *th })
            .collect();
        assert_eq!(episode_metrics(&exact, &task).unwrap(), (1.0, 0.0, 0.0));

        let shifted: Vec<ObjectPose> = exact.iter().map(|o| ObjectPose { p: [o.p[0] + 0.02, o.p[1]], ..*o }).collect();
        let (s, e, o) = episode_metrics(&shifted, &task).unwrap();
        assert_eq!(s, 0.0);
        assert!((e - 0.02).abs() < 1e-12);
        assert_eq!(o, 0.0);

        assert!(matches!(episode_metrics(&exact[..50], &task), Err(Error::TraceLength { .. })));
    }

    #[test]
    fn reset_without_jitter_is_deterministic() {
        let (plant, mut task) = setup();
        task.reset.object_jitter = [0.0; 3];
        task.reset.arm_jitter = 0.0;
        let a = reset(&task, &plant, &mut ChaCha8Rng::seed_from_u64(1));
        let b = reset(&task, &plant, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
        assert!(!a.attached);
        assert_eq!(a.t, 0);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let (plant, task) = setup();
        let cfg = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut env = Env::new(&plant, &cfg, &task, &mut rng);
        while !env.done() {
            env.step(&[0.0; 9]);
        }
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &task, env.trace(), env.rewards()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 102);
        assert!(text.starts_with("t,obj_x,obj_y,obj_theta,desired_x,desired_y,desired_theta,reward"));
    }
}
