//! Over-actuated, pull-only muscle-driven planar arm with a grasp latch.
//!
//! Three revolute joints (shoulder, elbow, wrist) are driven by eight
//! muscles through a constant signed moment-arm matrix. Joint dynamics are
//! decoupled (diagonal inertia) and integrated with semi-implicit Euler.
//! The object is either resting/falling freely or rigidly latched to the
//! end effector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.81;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = theta.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MusclePlantConfig {
    pub n_joints: usize,
    pub n_muscles: usize,
    /// Row-major `[n_joints][n_muscles]`, meters.
    pub moment_arms: Vec<Vec<f64>>,
    pub f_max: Vec<f64>,
    pub tau_act: f64,
    pub tau_deact: f64,
    pub link_lengths: Vec<f64>,
    pub link_inertias: Vec<f64>,
    pub joint_damping: Vec<f64>,
    /// `[lo, hi]` per joint, radians.
    pub joint_limits: Vec<[f64; 2]>,
    pub dt: f64,
    pub grasp_radius: f64,
    pub grip_threshold: f64,
    pub table_y: f64,
}

impl Default for MusclePlantConfig {
    fn default() -> Self {
        // Muscles: 0/1 shoulder flexor/extensor, 2/3 elbow, 4/5 wrist,
        // 6 bi-articular shoulder-elbow flexor, 7 bi-articular elbow-wrist extensor.
        let moment_arms = vec![
            vec![0.03, -0.03, 0.0, 0.0, 0.0, 0.0, 0.02, 0.0],
            vec![0.0, 0.0, 0.025, -0.025, 0.0, 0.0, 0.015, -0.015],
            vec![0.0, 0.0, 0.0, 0.0, 0.015, -0.015, 0.0, -0.01],
        ];
        Self {
            n_joints: 3,
            n_muscles: 8,
            moment_arms,
            f_max: vec![400.0, 400.0, 300.0, 300.0, 200.0, 200.0, 300.0, 200.0],
            tau_act: 0.010,
            tau_deact: 0.040,
            link_lengths: vec![0.3, 0.25, 0.1],
            link_inertias: vec![0.06, 0.03, 0.008],
            joint_damping: vec![2.0, 1.0, 0.25],
            joint_limits: vec![[-1.5, 2.5], [-2.6, 2.6], [-1.6, 1.6]],
            dt: 0.010,
            grasp_radius: 0.05,
            grip_threshold: 0.5,
            table_y: 0.0,
        }
    }
}

impl MusclePlantConfig {
    /// Checks the structural and physiological invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("plant: {msg}")));
        let (nj, nm) = (self.n_joints, self.n_muscles);
        if nj == 0 || nm == 0 {
            return bad("n_joints and n_muscles must be positive".into());
        }
        if self.moment_arms.len() != nj || self.moment_arms.iter().any(|r| r.len() != nm) {
            return bad(format!("moment_arms must be {nj} x {nm}"));
        }
        for (name, len) in [
            ("f_max", self.f_max.len()),
            ("link_lengths", self.link_lengths.len()),
            ("link_inertias", self.link_inertias.len()),
            ("joint_damping", self.joint_damping.len()),
            ("joint_limits", self.joint_limits.len()),
        ] {
            let want = if name == "f_max" { nm } else { nj };
            if len != want {
                return bad(format!("{name} has length {len}, expected {want}"));
            }
        }
        if !(self.tau_act > 0.0 && self.tau_act < self.tau_deact) {
            return bad("require 0 < tau_act < tau_deact".into());
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive".into());
        }
        if self.f_max.iter().any(|&f| !(f > 0.0)) {
            return bad("f_max must be positive".into());
        }
        if self.link_inertias.iter().any(|&i| !(i > 0.0)) {
            return bad("link_inertias must be positive".into());
        }
        if self.joint_damping.iter().any(|&d| d < 0.0) {
            return bad("joint_damping must be non-negative".into());
        }
        if self.joint_limits.iter().any(|l| !(l[0] < l[1])) {
            return bad("joint_limits need lo < hi".into());
        }
        for m in 0..nm {
            if (0..nj).all(|j| self.moment_arms[j][m] == 0.0) {
                return bad(format!("muscle {m} spans no joint"));
            }
        }
        for j in 0..nj {
            let row = &self.moment_arms[j];
            if !(row.iter().any(|&r| r > 0.0) && row.iter().any(|&r| r < 0.0)) {
                return bad(format!("joint {j} lacks an antagonist pair"));
            }
        }
        if !(self.grasp_radius > 0.0) {
            return bad("grasp_radius must be positive".into());
        }
        Ok(())
    }

    /// Number of action channels: one excitation per muscle plus grip.
    pub fn action_dim(&self) -> usize {
        self.n_muscles + 1
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub a: Vec<f64>,
    pub obj_p: [f64; 2],
    pub obj_theta: f64,
    pub obj_v: [f64; 2],
    pub obj_w: f64,
    pub attached: bool,
    pub t: usize,
}

impl PlantState {
    /// Arm at `q`, at rest, muscles silent, object resting at `obj_p`.
    pub fn at_rest(q: Vec<f64>, n_muscles: usize, obj_p: [f64; 2], obj_theta: f64) -> Self {
        let n = q.len();
        Self {
            q,
            qd: vec![0.0; n],
            a: vec![0.0; n_muscles],
            obj_p,
            obj_theta,
            obj_v: [0.0; 2],
            obj_w: 0.0,
            attached: false,
            t: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.qd).chain(&self.a).all(|v| v.is_finite())
            && self.obj_p.iter().chain(&self.obj_v).all(|v| v.is_finite())
            && self.obj_theta.is_finite()
            && self.obj_w.is_finite()
    }

    /// Kinetic energy of the joints under the diagonal inertia model.
    pub fn joint_kinetic_energy(&self, cfg: &MusclePlantConfig) -> f64 {
        self.qd
            .iter()
            .zip(&cfg.link_inertias)
            .map(|(qd, i)| 0.5 * i * qd * qd)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub u: Vec<f64>,
    pub grip: f64,
}

impl Control {
    /// Builds a control from a raw action vector `[u_0..u_{m-1}, grip]`,
    /// clamping every channel to `[0, 1]`.
    pub fn from_action(action: &[f64], n_muscles: usize) -> Self {
        debug_assert_eq!(action.len(), n_muscles + 1);
        let u = action[..n_muscles].iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self { u, grip: action[n_muscles].clamp(0.0, 1.0) }
    }

    pub fn idle(n_muscles: usize) -> Self {
        Self { u: vec![0.0; n_muscles], grip: 0.0 }
    }
}

/// First-order excitation-to-activation step with asymmetric time constants.
pub fn activation_step(a: &[f64], u: &[f64], cfg: &MusclePlantConfig) -> Vec<f64> {
    a.iter()
        .zip(u)
        .map(|(&a, &u)| {
            let tau = if u >= a { cfg.tau_act } else { cfg.tau_deact };
            (a + cfg.dt * (u - a) / tau).clamp(0.0, 1.0)
        })
        .collect()
}

/// End-effector position and orientation of the planar chain rooted at the origin.
pub fn forward_kinematics(q: &[f64], cfg: &MusclePlantConfig) -> ([f64; 2], f64) {
    let mut angle = 0.0;
    let mut p = [0.0, 0.0];
    for (qj, l) in q.iter().zip(&cfg.link_lengths) {
        angle += qj;
        p[0] += l * angle.cos();
        p[1] += l * angle.sin();
    }
    (p, angle)
}

/// Closed-form inverse kinematics for the 3-link chain: joint angles that put
/// the end effector at `pos` with orientation `theta`. Picks the elbow branch
/// with positive elbow angle first and falls back to the other one; returns
/// `None` when unreachable or outside the joint limits.
pub fn inverse_kinematics(pos: [f64; 2], theta: f64, cfg: &MusclePlantConfig) -> Option<Vec<f64>> {
    if cfg.n_joints != 3 {
        return None;
    }
    let (l1, l2, l3) = (cfg.link_lengths[0], cfg.link_lengths[1], cfg.link_lengths[2]);
    let wx = pos[0] - l3 * theta.cos();
    let wy = pos[1] - l3 * theta.sin();
    let d2 = wx * wx + wy * wy;
    let c2 = (d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    if !(-1.0..=1.0).contains(&c2) {
        return None;
    }
    for sign in [1.0, -1.0] {
        let q2 = sign * c2.acos();
        let q1 = wy.atan2(wx) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
        let q1 = wrap_angle(q1);
        let q3 = wrap_angle(theta - q1 - q2);
        let q = vec![q1, q2, q3];
        let within = q
            .iter()
            .zip(&cfg.joint_limits)
            .all(|(v, lim)| *v >= lim[0] && *v <= lim[1]);
        if within {
            return Some(q);
        }
    }
    None
}

/// Net joint torques produced by activations `a`.
pub fn joint_torques(a: &[f64], cfg: &MusclePlantConfig) -> Vec<f64> {
    cfg.moment_arms
        .iter()
        .map(|row| {
            row.iter()
                .zip(a)
                .zip(&cfg.f_max)
                .map(|((r, a), f)| r * a * f)
                .sum()
        })
        .collect()
}

/// Advances the plant by one fixed step.
pub fn plant_step(s: &PlantState, c: &Control, cfg: &MusclePlantConfig) -> PlantState {
    let u: Vec<f64> = c.u.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let grip = c.grip.clamp(0.0, 1.0);
    let dt = cfg.dt;

    let a = activation_step(&s.a, &u, cfg);
    let tau = joint_torques(&a, cfg);

    let mut q = s.q.clone();
    let mut qd = s.qd.clone();
    for j in 0..cfg.n_joints {
        let acc = (tau[j] - cfg.joint_damping[j] * qd[j]) / cfg.link_inertias[j];
        qd[j] += dt * acc;
        q[j] += dt * qd[j];
        let [lo, hi] = cfg.joint_limits[j];
        if q[j] < lo {
            q[j] = lo;
            if qd[j] < 0.0 {
                qd[j] = 0.0;
            }
        } else if q[j] > hi {
            q[j] = hi;
            if qd[j] > 0.0 {
                qd[j] = 0.0;
            }
        }
    }

    let (ee_prev, ee_theta_prev) = forward_kinematics(&s.q, cfg);
    let (ee, ee_theta) = forward_kinematics(&q, cfg);

    let mut next = PlantState {
        q,
        qd,
        a,
        obj_p: s.obj_p,
        obj_theta: s.obj_theta,
        obj_v: s.obj_v,
        obj_w: s.obj_w,
        attached: s.attached,
        t: s.t + 1,
    };

    let gripping = grip >= cfg.grip_threshold;
    if next.attached && !gripping {
        next.attached = false;
    }
    if !next.attached {
        let dist = ((ee[0] - next.obj_p[0]).powi(2) + (ee[1] - next.obj_p[1]).powi(2)).sqrt();
        if gripping && dist <= cfg.grasp_radius {
            next.attached = true;
        }
    }

    if next.attached {
        next.obj_p = ee;
        next.obj_theta = ee_theta;
        if s.attached {
            next.obj_v = [(ee[0] - ee_prev[0]) / dt, (ee[1] - ee_prev[1]) / dt];
            next.obj_w = (ee_theta - ee_theta_prev) / dt;
        } else {
            next.obj_v = [0.0, 0.0];
            next.obj_w = 0.0;
        }
    } else {
        let resting = next.obj_p[1] <= cfg.table_y && next.obj_v[1] <= 0.0;
        if resting {
            next.obj_p[1] = cfg.table_y;
            next.obj_v = [0.0, 0.0];
            next.obj_w = 0.0;
        } else {
            next.obj_v[1] -= GRAVITY * dt;
            next.obj_p[0] += dt * next.obj_v[0];
            next.obj_p[1] += dt * next.obj_v[1];
            next.obj_theta += dt * next.obj_w;
            if next.obj_p[1] <= cfg.table_y {
                next.obj_p[1] = cfg.table_y;
                next.obj_v = [0.0, 0.0];
                next.obj_w = 0.0;
            }
        }
    }

    assert!(next.is_finite(), "plant produced a non-finite state at t={}", next.t);
    next
}
