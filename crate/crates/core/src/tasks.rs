//! Parametric generator for the object-trajectory task suite, suite
//! statistics, and train/held-out splits.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{inverse_kinematics, MusclePlantConfig};

/// Largest allowed object displacement between consecutive waypoints.
pub const MAX_STEP_DISPLACEMENT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    Lift,
    Relocate,
    Rotate,
    Pour,
    Shake,
    Hammer,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 6] = [
        TaskFamily::Lift,
        TaskFamily::Relocate,
        TaskFamily::Rotate,
        TaskFamily::Pour,
        TaskFamily::Shake,
        TaskFamily::Hammer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Lift => "lift",
            TaskFamily::Relocate => "relocate",
            TaskFamily::Rotate => "rotate",
            TaskFamily::Pour => "pour",
            TaskFamily::Shake => "shake",
            TaskFamily::Hammer => "hammer",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesiredTrajectory {
    pub positions: Vec<[f64; 2]>,
    pub orientations: Vec<f64>,
}

impl DesiredTrajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Builds a trajectory by evaluating `f(s)` for `s = t / horizon`.
    pub fn from_fn(horizon: usize, f: impl Fn(f64) -> ([f64; 2], f64)) -> Self {
        let (positions, orientations) = (0..=horizon)
            .map(|t| f(t as f64 / horizon as f64))
            .unzip();
        Self { positions, orientations }
    }

    pub fn max_step_displacement(&self) -> f64 {
        self.positions
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .fold(0.0, f64::max)
    }

    /// Finite, followable and every waypoint reachable by the arm.
    pub fn check(&self, plant: &MusclePlantConfig) -> std::result::Result<(), String> {
        if self.positions.len() != self.orientations.len() {
            return Err("positions/orientations length differ".into());
        }
        let finite = self.positions.iter().flatten().chain(&self.orientations).all(|v| v.is_finite());
        if !finite {
            return Err("non-finite waypoint".into());
        }
        let step = self.max_step_displacement();
        if step > MAX_STEP_DISPLACEMENT {
            return Err(format!("step displacement {step:.4} m exceeds bound"));
        }
        for (t, (p, th)) in self.positions.iter().zip(&self.orientations).enumerate() {
            if p[1] < plant.table_y - 1e-12 {
                return Err(format!("waypoint {t} below the table"));
            }
            if inverse_kinematics(*p, *th, plant).is_none() {
                return Err(format!("waypoint {t} unreachable"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetDistribution {
    /// Nominal object pose `[x, y, theta]`.
    pub object_start: [f64; 3],
    /// Half-widths of the uniform jitter on `[x, y, theta]`.
    pub object_jitter: [f64; 3],
    /// Nominal joint angles, end effector at the nominal object pose.
    pub arm_start: Vec<f64>,
    /// Half-width of the uniform jitter on each joint angle.
    pub arm_jitter: f64,
}

impl ResetDistribution {
    /// Near-object start: arm placed by inverse kinematics on the nominal pose.
    pub fn near_object(
        object_start: [f64; 3],
        object_jitter: [f64; 3],
        arm_jitter: f64,
        plant: &MusclePlantConfig,
    ) -> Option<Self> {
        let arm_start = inverse_kinematics([object_start[0], object_start[1]], object_start[2], plant)?;
        Some(Self { object_start, object_jitter, arm_start, arm_jitter })
    }

    /// Worst-case end-effector-to-object distance over the jitter box.
    pub fn worst_case_gap(&self, plant: &MusclePlantConfig) -> f64 {
        let (ee, _) = crate::plant::forward_kinematics(&self.arm_start, plant);
        let nominal = ((ee[0] - self.object_start[0]).powi(2) + (ee[1] - self.object_start[1]).powi(2)).sqrt();
        // joint j moves the tip by at most |dq| * (distance from joint j to the tip)
        let lever: f64 = (0..plant.n_joints)
            .map(|j| plant.link_lengths[j..].iter().sum::<f64>())
            .sum();
        let obj = (self.object_jitter[0].powi(2) + self.object_jitter[1].powi(2)).sqrt();
        nominal + self.arm_jitter * lever + obj
    }

    pub fn check(&self, plant: &MusclePlantConfig) -> std::result::Result<(), String> {
        if self.arm_start.len() != plant.n_joints {
            return Err("arm_start has the wrong joint count".into());
        }
        if self.object_jitter.iter().chain(std::iter::once(&self.arm_jitter)).any(|j| *j < 0.0) {
            return Err("negative jitter".into());
        }
        let gap = self.worst_case_gap(plant);
        if gap > 2.0 * plant.grasp_radius {
            return Err(format!("worst-case start gap {gap:.4} m exceeds 2 x grasp_radius"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub family: TaskFamily,
    pub horizon: usize,
    pub reset: ResetDistribution,
    pub trajectory: DesiredTrajectory,
}

impl TaskSpec {
    pub fn check(&self, plant: &MusclePlantConfig) -> Result<()> {
        let fail = |m: String| Err(Error::TaskGeneration(format!("{}: {m}", self.id)));
        if self.trajectory.len() != self.horizon + 1 {
            return fail(format!(
                "trajectory has {} points, horizon {} needs {}",
                self.trajectory.len(),
                self.horizon,
                self.horizon + 1
            ));
        }
        let p0 = self.trajectory.positions[0];
        let o = self.reset.object_start;
        if p0 != [o[0], o[1]] || self.trajectory.orientations[0] != o[2] {
            return fail("trajectory does not start at the nominal object pose".into());
        }
        self.trajectory.check(plant).or_else(fail)?;
        self.reset.check(plant).or_else(fail)
    }

    fn build(
        id: String,
        family: TaskFamily,
        start: [f64; 3],
        horizon: usize,
        jitter: &JitterConfig,
        plant: &MusclePlantConfig,
        f: impl Fn(f64) -> ([f64; 2], f64),
    ) -> Result<Self> {
        let reset = ResetDistribution::near_object(start, jitter.object, jitter.arm, plant)
            .ok_or_else(|| Error::TaskGeneration(format!("{id}: start pose unreachable")))?;
        let mut trajectory = DesiredTrajectory::from_fn(horizon, f);
        // exact start, independent of floating-point evaluation of f(0)
        trajectory.positions[0] = [start[0], start[1]];
        trajectory.orientations[0] = start[2];
        let task = Self { id, family, horizon, reset, trajectory };
        task.check(plant)?;
        Ok(task)
    }

    /// Vertical linear ramp of height `h`. `h = 0` gives a hold-position task.
    pub fn lift(
        id: impl Into<String>,
        start: [f64; 3],
        h: f64,
        horizon: usize,
        jitter: &JitterConfig,
        plant: &MusclePlantConfig,
    ) -> Result<Self> {
        Self::build(id.into(), TaskFamily::Lift, start, horizon, jitter, plant, |s| {
            ([start[0], start[1] + h * s], start[2])
        })
    }

    /// Straight-line move by `offset`, optionally turning by `turn` (pour).
    pub fn relocate(
        id: impl Into<String>,
        start: [f64; 3],
        offset: [f64; 2],
        turn: f64,
        horizon: usize,
        jitter: &JitterConfig,
        plant: &MusclePlantConfig,
    ) -> Result<Self> {
        let family = if turn == 0.0 { TaskFamily::Relocate } else { TaskFamily::Pour };
        Self::build(id.into(), family, start, horizon, jitter, plant, |s| {
            ([start[0] + offset[0] * s, start[1] + offset[1] * s], start[2] + turn * s)
        })
    }

    /// In-place orientation ramp.
    pub fn rotate(
        id: impl Into<String>,
        start: [f64; 3],
        turn: f64,
        horizon: usize,
        jitter: &JitterConfig,
        plant: &MusclePlantConfig,
    ) -> Result<Self> {
        Self::build(id.into(), TaskFamily::Rotate, start, horizon, jitter, plant, |s| {
            ([start[0], start[1]], start[2] + turn * s)
        })
    }

    /// Horizontal sinusoid with `cycles` periods over the horizon.
    pub fn shake(
        id: impl Into<String>,
        start: [f64; 3],
        amplitude: f64,
        cycles: f64,
        horizon: usize,
        jitter: &JitterConfig,
        plant: &MusclePlantConfig,
    ) -> Result<Self> {
        Self::build(id.into(), TaskFamily::Shake, start, horizon, jitter, plant, |s| {
            let phase = 2.0 * PI * cycles * s;
            ([start[0] + amplitude * phase.sin(), start[1]], start[2])
        })
    }

    /// Vertical raise-and-strike cycles with an orientation swing.
    pub fn hammer(
        id: impl Into<String>,
        start: [f64; 3],
        amplitude: f64,
        swing: f64,
        cycles: f64,
        horizon: usize,
        jitter: &JitterConfig,
        plant: &MusclePlantConfig,
    ) -> Result<Self> {
        Self::build(id.into(), TaskFamily::Hammer, start, horizon, jitter, plant, |s| {
            let phase = 2.0 * PI * cycles * s;
            (
                [start[0], start[1] + 0.5 * amplitude * (1.0 - phase.cos())],
                start[2] + swing * phase.sin(),
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyCounts {
    pub lift: usize,
    pub relocate: usize,
    pub rotate: usize,
    pub pour: usize,
    pub shake: usize,
    pub hammer: usize,
}

impl Default for FamilyCounts {
    fn default() -> Self {
        Self { lift: 10, relocate: 10, rotate: 10, pour: 9, shake: 9, hammer: 9 }
    }
}

impl FamilyCounts {
    pub fn get(&self, family: TaskFamily) -> usize {
        match family {
            TaskFamily::Lift => self.lift,
            TaskFamily::Relocate => self.relocate,
            TaskFamily::Rotate => self.rotate,
            TaskFamily::Pour => self.pour,
            TaskFamily::Shake => self.shake,
            TaskFamily::Hammer => self.hammer,
        }
    }

    pub fn total(&self) -> usize {
        TaskFamily::ALL.iter().map(|f| self.get(*f)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    /// Uniform half-widths on object `[x, y, theta]`.
    pub object: [f64; 3],
    /// Uniform half-width on each joint angle.
    pub arm: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self { object: [0.004, 0.0, 0.02], arm: 0.005 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub seed: u64,
    pub counts: FamilyCounts,
    pub horizon: usize,
    pub jitter: JitterConfig,
    pub max_retries: usize,
    pub split_mode: SplitMode,
    pub split_k: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            counts: FamilyCounts::default(),
            horizon: 100,
            jitter: JitterConfig::default(),
            max_retries: 200,
            split_mode: SplitMode::Diverse,
            split_k: 14,
        }
    }
}

fn sample_start(rng: &mut ChaCha8Rng, plant: &MusclePlantConfig) -> [f64; 3] {
    [rng.gen_range(0.35..0.5), plant.table_y, rng.gen_range(-0.4..0.4)]
}

fn sample_task(
    family: TaskFamily,
    id: String,
    rng: &mut ChaCha8Rng,
    cfg: &SuiteConfig,
    plant: &MusclePlantConfig,
) -> Result<TaskSpec> {
    let h = cfg.horizon;
    let j = &cfg.jitter;
    let start = sample_start(rng, plant);
    let signed = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let m = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    };
    match family {
        TaskFamily::Lift => TaskSpec::lift(id, start, rng.gen_range(0.1..0.3), h, j, plant),
        TaskFamily::Relocate | TaskFamily::Pour => {
            let dist = rng.gen_range(0.1..0.4);
            let dir = rng.gen_range(0.0..PI);
            let offset = [dist * dir.cos(), dist * dir.sin()];
            let turn = if family == TaskFamily::Pour { signed(rng, 0.3, FRAC_PI_2) } else { 0.0 };
            TaskSpec::relocate(id, start, offset, turn, h, j, plant)
        }
        TaskFamily::Rotate => TaskSpec::rotate(id, start, signed(rng, 0.3, FRAC_PI_2), h, j, plant),
        TaskFamily::Shake => {
            let amp = rng.gen_range(0.05..0.15);
            let cycles = rng.gen_range(1.0..3.0);
            TaskSpec::shake(id, start, amp, cycles, h, j, plant)
        }
        TaskFamily::Hammer => {
            let amp = rng.gen_range(0.05..0.15);
            let swing = rng.gen_range(0.2..0.6);
            let cycles = rng.gen_range(1.0..3.0);
            TaskSpec::hammer(id, start, amp, swing, cycles, h, j, plant)
        }
    }
}

/// Generates the suite: families in canonical order, ids `<family>-<nn>`.
/// Draws that violate trajectory or reset invariants are resampled.
pub fn generate_suite(cfg: &SuiteConfig, plant: &MusclePlantConfig) -> Result<Vec<TaskSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut suite = Vec::with_capacity(cfg.counts.total());
    for family in TaskFamily::ALL {
        for i in 0..cfg.counts.get(family) {
            let id = format!("{}-{:02}", family.name(), i);
            let mut last_err = None;
            let mut made = None;
            for _ in 0..=cfg.max_retries {
                match sample_task(family, id.clone(), &mut rng, cfg, plant) {
                    Ok(task) => {
                        made = Some(task);
                        break;
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            match made {
                Some(task) => suite.push(task),
                None => {
                    return Err(last_err.unwrap_or_else(|| {
                        Error::TaskGeneration(format!("{id}: retries exhausted"))
                    }))
                }
            }
        }
    }
    Ok(suite)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskStats {
    pub pos_std: f64,
    pub rot_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteStats {
    pub ids: Vec<String>,
    pub per_task: Vec<TaskStats>,
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn task_stats(task: &TaskSpec) -> TaskStats {
    let tr = &task.trajectory;
    let p0 = tr.positions[0];
    let th0 = tr.orientations[0];
    TaskStats {
        pos_std: population_std(
            tr.positions.iter().map(|p| ((p[0] - p0[0]).powi(2) + (p[1] - p0[1]).powi(2)).sqrt()),
        ),
        rot_std: population_std(tr.orientations.iter().map(|th| (th - th0).abs())),
    }
}

/// Per-task standard deviation of positional and rotational displacement.
pub fn suite_stats(suite: &[TaskSpec]) -> Result<SuiteStats> {
    if suite.is_empty() {
        return Err(Error::EmptySuite);
    }
    Ok(SuiteStats {
        ids: suite.iter().map(|t| t.id.clone()).collect(),
        per_task: suite.iter().map(task_stats).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Diverse,
    Homogeneous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<TaskSpec>,
    pub heldout: Vec<TaskSpec>,
}

/// Stats scaled so that each axis spans at most `[0, 1]` over the suite.
fn normalized_points(stats: &SuiteStats) -> Vec<[f64; 2]> {
    let max_p = stats.per_task.iter().map(|s| s.pos_std).fold(0.0, f64::max);
    let max_r = stats.per_task.iter().map(|s| s.rot_std).fold(0.0, f64::max);
    let scale = |v: f64, m: f64| if m > 0.0 { v / m } else { 0.0 };
    stats
        .per_task
        .iter()
        .map(|s| [scale(s.pos_std, max_p), scale(s.rot_std, max_r)])
        .collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Greedy farthest-point selection of `k` indices. The first index is drawn
/// from `seed`; while some family present in the suite is uncovered, only
/// tasks of uncovered families are candidates. Ties go to the lower index.
pub fn diverse_selection(suite: &[TaskSpec], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = suite.len();
    if k > n {
        return Err(Error::Split(format!("k={k} exceeds suite size {n}")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let stats = suite_stats(suite)?;
    let pts = normalized_points(&stats);
    let mut families: Vec<TaskFamily> = suite.iter().map(|t| t.family).collect();
    families.sort();
    families.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut min_dist: Vec<f64> = pts.iter().map(|p| dist(*p, pts[chosen[0]])).collect();
    while chosen.len() < k {
        let covered: Vec<TaskFamily> = chosen.iter().map(|&i| suite[i].family).collect();
        let need_family = families.iter().any(|f| !covered.contains(f));
        let mut best: Option<usize> = None;
        for i in 0..n {
            if chosen.contains(&i) || (need_family && covered.contains(&suite[i].family)) {
                continue;
            }
            if best.map_or(true, |b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("candidates remain while chosen < n");
        chosen.push(b);
        for i in 0..n {
            min_dist[i] = min_dist[i].min(dist(pts[i], pts[b]));
        }
    }
    Ok(chosen)
}

/// Splits the suite into `k` training tasks and the held-out remainder.
/// Held-out tasks keep suite order.
pub fn make_splits(suite: &[TaskSpec], mode: SplitMode, k: usize, seed: u64) -> Result<Split> {
    if k > suite.len() {
        return Err(Error::Split(format!("k={k} exceeds suite size {}", suite.len())));
    }
    let chosen: Vec<usize> = match mode {
        SplitMode::Diverse => diverse_selection(suite, k, seed)?,
        SplitMode::Homogeneous => {
            let lifts: Vec<usize> =
                (0..suite.len()).filter(|&i| suite[i].family == TaskFamily::Lift).collect();
            if lifts.len() < k {
                return Err(Error::Split(format!(
                    "homogeneous split needs {k} lift tasks, suite has {}",
                    lifts.len()
                )));
            }
            lifts[..k].to_vec()
        }
    };
    let train = chosen.iter().map(|&i| suite[i].clone()).collect();
    let heldout = (0..suite.len())
        .filter(|i| !chosen.contains(i))
        .map(|i| suite[i].clone())
        .collect();
    Ok(Split { train, heldout })
}

/// Mean pairwise Euclidean distance of the tasks in (normalized-to-suite) stats space.
pub fn mean_pairwise_spread(suite: &[TaskSpec], subset: &[TaskSpec]) -> Result<f64> {
    let stats = suite_stats(suite)?;
    let pts = normalized_points(&stats);
    let idx: Vec<usize> = subset
        .iter()
        .map(|t| stats.ids.iter().position(|id| *id == t.id).ok_or_else(|| Error::UnknownTask(t.id.clone())))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            total += dist(pts[idx[a]], pts[idx[b]]);
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// Structured-text container for a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteFile {
    pub tasks: Vec<TaskSpec>,
}

impl SuiteFile {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("suite serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse { path: "<suite>".into(), message: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plant() -> MusclePlantConfig {
        MusclePlantConfig::default()
    }

    #[test]
    fn empty_counts_give_empty_suite() {
        let cfg = SuiteConfig {
            counts: FamilyCounts { lift: 0, relocate: 0, rotate: 0, pour: 0, shake: 0, hammer: 0 },
            ..Default::default()
        };
        assert!(generate_suite(&cfg, &plant()).unwrap().is_empty());
    }

    #[test]
    fn default_suite_is_valid_and_deterministic() {
        let cfg = SuiteConfig::default();
        let a = generate_suite(&cfg, &plant()).unwrap();
        let b = generate_suite(&cfg, &plant()).unwrap();
        assert_eq!(a.len(), 57);
        assert_eq!(a, b);
        for t in &a {
            t.check(&plant()).unwrap();
            assert!(t.trajectory.max_step_displacement() <= MAX_STEP_DISPLACEMENT);
        }
        let other = generate_suite(&SuiteConfig { seed: 9, ..cfg }, &plant()).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn lift_ramp_endpoint() {
        let t = TaskSpec::lift("l", [0.45, 0.0, 0.0], 0.2, 100, &JitterConfig::default(), &plant()).unwrap();
        let p = &t.trajectory.positions;
        assert!((p[100][0] - p[0][0]).abs() < 1e-12);
        assert!((p[100][1] - p[0][1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn stats_of_constant_and_pure_rotation() {
        let j = JitterConfig::default();
        let hold = TaskSpec::lift("h", [0.45, 0.0, 0.1], 0.0, 100, &j, &plant()).unwrap();
        let s = task_stats(&hold);
        assert_eq!((s.pos_std, s.rot_std), (0.0, 0.0));
        let rot = TaskSpec::rotate("r", [0.45, 0.0, 0.0], 1.0, 100, &j, &plant()).unwrap();
        let s = task_stats(&rot);
        assert_eq!(s.pos_std, 0.0);
        assert!(s.rot_std > 0.0);
    }

    #[test]
    fn suite_stats_rejects_empty() {
        assert!(matches!(suite_stats(&[]), Err(Error::EmptySuite)));
    }

    #[test]
    fn full_split_has_empty_heldout() {
        let suite = generate_suite(&SuiteConfig::default(), &plant()).unwrap();
        let s = make_splits(&suite, SplitMode::Diverse, suite.len(), 0).unwrap();
        assert!(s.heldout.is_empty());
        assert_eq!(s.train.len(), suite.len());
    }

    #[test]
    fn homogeneous_split_is_all_lift_and_fails_when_short() {
        let suite = generate_suite(&SuiteConfig::default(), &plant()).unwrap();
        let s = make_splits(&suite, SplitMode::Homogeneous, 6, 0).unwrap();
        assert!(s.train.iter().all(|t| t.family == TaskFamily::Lift));
        assert_eq!(s.heldout.len(), 51);
        assert!(make_splits(&suite, SplitMode::Homogeneous, 14, 0).is_err());
    }

    #[test]
    fn diverse_split_covers_all_families() {
        let suite = generate_suite(&SuiteConfig::default(), &plant()).unwrap();
        let s = make_splits(&suite, SplitMode::Diverse, 14, 0).unwrap();
        assert_eq!((s.train.len(), s.heldout.len()), (14, 43));
        for f in TaskFamily::ALL {
            assert!(s.train.iter().any(|t| t.family == f), "missing {f}");
        }
    }

    #[test]
    fn suite_file_round_trips() {
        let cfg = SuiteConfig { counts: FamilyCounts { lift: 1, relocate: 1, rotate: 1, pour: 1, shake: 1, hammer: 1 }, ..Default::default() };
        let suite = generate_suite(&cfg, &plant()).unwrap();
        let file = SuiteFile { tasks: suite };
        let text = file.to_toml();
        assert_eq!(SuiteFile::from_toml(&text).unwrap(), file);
    }
}
