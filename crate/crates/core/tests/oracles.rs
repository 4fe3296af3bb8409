//! Reference values computed independently of the library code paths.

mod common;

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use approx::assert_abs_diff_eq;
use common::*;
use dexprior::agent::{stream_rng, ActorCritic};
use dexprior::env::{self, episode_metrics, positional_encoding, EnvConfig, ObjectPose, RewardConfig};
use dexprior::nn::{gaussian_entropy, gaussian_log_prob, ForwardCache, Mlp, RunningNormalizer};
use dexprior::plant::{activation_step, forward_kinematics, plant_step, Control, MusclePlantConfig, PlantState};
use dexprior::ppo::{
    allocate_episodes, compute_gae, ppo_loss_and_grad, LossWorkspace, Minibatch, PpoConfig, PpoGrads,
};
use dexprior::synergy::{nnmf, synergy_overlap, vaf, ActivationMatrix, SynergyDecomposition};
use dexprior::tasks::{diverse_selection, suite_stats, task_stats, JitterConfig, TaskSpec};
use rand::Rng;

fn plant() -> MusclePlantConfig {
    MusclePlantConfig::default()
}

fn still() -> JitterConfig {
    JitterConfig { object: [0.0; 3], arm: 0.0 }
}

#[test]
fn activation_saturates_in_one_step() {
    let mut cfg = plant();
    cfg.tau_act = 0.01;
    cfg.dt = 0.01;
    let n = cfg.n_muscles;
    assert_eq!(activation_step(&vec![0.0; n], &vec![1.0; n], &cfg), vec![1.0; n]);
    assert_eq!(activation_step(&vec![0.0; n], &vec![0.0; n], &cfg), vec![0.0; n]);
    assert_eq!(activation_step(&vec![1.0; n], &vec![1.0; n], &cfg), vec![1.0; n]);
}

#[test]
fn one_step_shoulder_velocity() {
    let mut cfg = plant();
    // muscle 0 acts on the shoulder only
    let m = 0;
    assert!(cfg.moment_arms[1][m] == 0.0 && cfg.moment_arms[2][m] == 0.0);
    cfg.joint_damping = vec![0.0; 3];
    let s = PlantState::at_rest(vec![0.3, 0.4, 0.0], cfg.n_muscles, [0.5, 0.0], 0.0);
    let mut s = s;
    s.a[m] = 1.0;
    let mut u = vec![0.0; cfg.n_muscles];
    u[m] = 1.0;
    let next = plant_step(&s, &Control { u, grip: 0.0 }, &cfg);
    let want = cfg.dt * cfg.moment_arms[0][m] * cfg.f_max[m] / cfg.link_inertias[0];
    assert_abs_diff_eq!(next.qd[0], want, epsilon = 1e-12);
    assert_abs_diff_eq!(next.qd[1], 0.0, epsilon = 1e-12);
}

#[test]
fn forward_kinematics_matches_trig() {
    let mut cfg = plant();
    cfg.link_lengths = vec![1.0, 1.0, 1.0];
    let (p, th) = forward_kinematics(&[FRAC_PI_4, FRAC_PI_4, 0.0], &cfg);
    let x = FRAC_PI_4.cos() + FRAC_PI_2.cos() + FRAC_PI_2.cos();
    let y = FRAC_PI_4.sin() + FRAC_PI_2.sin() + FRAC_PI_2.sin();
    assert_abs_diff_eq!(p[0], x, epsilon = 1e-12);
    assert_abs_diff_eq!(p[1], y, epsilon = 1e-12);
    assert_abs_diff_eq!(th, FRAC_PI_2, epsilon = 1e-12);

    let cfg = plant();
    let (p, th) = forward_kinematics(&[0.0; 3], &cfg);
    assert_abs_diff_eq!(p[0], 0.65, epsilon = 1e-12);
    assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
    assert_eq!(th, 0.0);
    let (p, _) = forward_kinematics(&[FRAC_PI_2, 0.0, 0.0], &cfg);
    assert_abs_diff_eq!(p[0], 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(p[1], 0.65, epsilon = 1e-12);
}

#[test]
fn positional_encoding_quarter_period() {
    assert_eq!(positional_encoding(0, 100), [0.0, 1.0, 0.0, 1.0]);
    let e = positional_encoding(25, 100);
    for (a, b) in e.iter().zip([1.0, 0.0, 0.0, -1.0]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }
}

fn state_at(p: [f64; 2], theta: f64, a: f64) -> PlantState {
    let mut s = PlantState::at_rest(vec![0.0; 3], 8, p, theta);
    s.a = vec![a; 8];
    s
}

#[test]
fn reward_hand_examples() {
    let cfg = plant();
    let rc = RewardConfig::default();
    let task = TaskSpec::lift("l", [0.45, 0.0, 0.0], 0.2, 100, &still(), &cfg).unwrap();
    let t = 49;
    let goal = task.trajectory.positions[t + 1];
    let th = task.trajectory.orientations[t + 1];

    let on_table = state_at([goal[0], 0.0], th, 0.0);
    let mut flat = task.clone();
    flat.trajectory.positions[t + 1] = [goal[0], 0.0];
    assert_abs_diff_eq!(env::reward(&on_table, &flat, t, &rc, 0.0), 2.0, epsilon = 1e-12);

    let lifted = state_at(goal, th, 0.0);
    assert_abs_diff_eq!(env::reward(&lifted, &task, t, &rc, 0.0), 3.0, epsilon = 1e-12);

    // 0.1 m off target, 0.5 rad off, all activations at 0.5, lifted
    let s = state_at([goal[0] + 0.06, goal[1] + 0.08], th + 0.5, 0.5);
    let want = 2.0 * (-1.5f64).exp() + 1.0 - 0.05 * (8.0f64 * 0.25).sqrt();
    assert_abs_diff_eq!(env::reward(&s, &task, t, &rc, 0.0), want, epsilon = 1e-9);
}

#[test]
fn reward_wraps_orientation_error() {
    let cfg = plant();
    let rc = RewardConfig { w_lift: 0.0, w_effort: 0.0, ..RewardConfig::default() };
    let d = 0.1;
    let mut task = TaskSpec::rotate("r", [0.45, 0.0, 0.0], 0.0, 100, &still(), &cfg).unwrap();
    task.trajectory.orientations[1] = -PI + d;
    let s = state_at(task.trajectory.positions[1], PI - d, 0.0);
    assert_abs_diff_eq!(env::reward(&s, &task, 0, &rc, 0.0), 2.0 * (-2.0 * d).exp(), epsilon = 1e-12);
}

fn poses(task: &TaskSpec, offset: impl Fn(usize) -> f64) -> Vec<ObjectPose> {
    task.trajectory
        .positions
        .iter()
        .zip(&task.trajectory.orientations)
        .enumerate()
        .map(|(t, (p, th))| ObjectPose { p: [p[0] + offset(t), p[1]], theta: *th })
        .collect()
}

#[test]
fn metrics_hand_examples() {
    let task = TaskSpec::lift("l", [0.45, 0.0, 0.0], 0.2, 100, &still(), &plant()).unwrap();
    assert_eq!(episode_metrics(&poses(&task, |_| 0.0), &task).unwrap(), (1.0, 0.0, 0.0));

    let (s, e, o) = episode_metrics(&poses(&task, |_| 0.02), &task).unwrap();
    assert_eq!(s, 0.0);
    assert_abs_diff_eq!(e, 0.02, epsilon = 1e-12);
    assert_eq!(o, 0.0);

    let off = |t: usize| if t % 2 == 0 { 0.005 } else { 0.03 };
    let (s, e, _) = episode_metrics(&poses(&task, off), &task).unwrap();
    let oracle_e = (1..=100).map(|t| off(t)).sum::<f64>() / 100.0;
    assert_abs_diff_eq!(s, 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(e, oracle_e, epsilon = 1e-12);

    assert!(episode_metrics(&poses(&task, |_| 0.0)[..50], &task).is_err());
}

#[test]
fn reset_jitter_has_uniform_spread() {
    let cfg = plant();
    let j = JitterConfig { object: [0.02, 0.0, 0.0], arm: 0.0 };
    let task = TaskSpec::lift("l", [0.45, 0.0, 0.0], 0.1, 100, &j, &cfg).unwrap();
    let mut rng = stream_rng(&[5]);
    let xs: Vec<f64> = (0..1000).map(|_| env::reset(&task, &cfg, &mut rng).obj_p[0]).collect();
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    let want = 0.02 / 3f64.sqrt();
    assert!((sd - want).abs() < 0.1 * want, "{sd} vs {want}");
    for _ in 0..1000 {
        let s = env::reset(&task, &cfg, &mut rng);
        let (ee, _) = forward_kinematics(&s.q, &cfg);
        assert!(((ee[0] - s.obj_p[0]).powi(2) + (ee[1] - s.obj_p[1]).powi(2)).sqrt() <= 2.0 * cfg.grasp_radius);
    }
}

#[test]
fn lift_ramp_reaches_its_height() {
    let task = TaskSpec::lift("l", [0.4, 0.0, 0.1], 0.2, 100, &JitterConfig::default(), &plant()).unwrap();
    let tr = &task.trajectory;
    assert_abs_diff_eq!(tr.positions[100][0] - tr.positions[0][0], 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(tr.positions[100][1] - tr.positions[0][1], 0.2, epsilon = 1e-12);
}

#[test]
fn shake_stats_match_brute_force_std() {
    let task = TaskSpec::shake("s", [0.45, 0.0, 0.0], 0.1, 2.0, 100, &still(), &plant()).unwrap();
    let p0 = task.trajectory.positions[0];
    let d: Vec<f64> = task.trajectory.positions.iter().map(|p| (p[0] - p0[0]).hypot(p[1] - p0[1])).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    let st = task_stats(&task);
    assert_abs_diff_eq!(st.pos_std, sd, epsilon = 1e-12);
    assert_eq!(st.rot_std, 0.0);
    let rot = TaskSpec::rotate("r", [0.45, 0.0, 0.0], 1.0, 100, &still(), &plant()).unwrap();
    assert_eq!(task_stats(&rot).pos_std, 0.0);
    assert!(task_stats(&rot).rot_std > 0.0);
}

#[test]
fn diverse_split_matches_hand_greedy() {
    let cfg = plant();
    let j = still();
    let mut suite = Vec::new();
    for i in 0..10 {
        suite.push(TaskSpec::lift(format!("lift-{i:02}"), [0.4, 0.0, 0.0], 0.02 * (i + 1) as f64, 100, &j, &cfg).unwrap());
    }
    for i in 0..10 {
        let turn = 0.15 * (i + 1) as f64 * if i % 2 == 0 { 1.0 } else { -1.0 };
        suite.push(TaskSpec::rotate(format!("rotate-{i:02}"), [0.42, 0.0, 0.0], turn, 100, &j, &cfg).unwrap());
    }
    let k = 6;
    let seed = 3;
    let got = diverse_selection(&suite, k, seed).unwrap();

    // hand oracle: the same seeded first pick, then brute-force farthest point
    let stats = suite_stats(&suite).unwrap();
    let mp = stats.per_task.iter().map(|s| s.pos_std).fold(0.0, f64::max);
    let mr = stats.per_task.iter().map(|s| s.rot_std).fold(0.0, f64::max);
    let pts: Vec<(f64, f64)> = stats.per_task.iter().map(|s| (s.pos_std / mp, s.rot_std / mr)).collect();
    let mut chosen = vec![got[0]];
    while chosen.len() < k {
        let fams: Vec<_> = chosen.iter().map(|&i| suite[i].family).collect();
        let all_covered = suite.iter().all(|t| fams.contains(&t.family));
        let mut best = (usize::MAX, -1.0);
        for i in 0..suite.len() {
            if chosen.contains(&i) || (!all_covered && fams.contains(&suite[i].family)) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| ((pts[i].0 - pts[c].0).powi(2) + (pts[i].1 - pts[c].1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        chosen.push(best.0);
    }
    assert_eq!(got, chosen);
}

#[test]
fn mlp_matches_scalar_oracle() {
    let mut rng = stream_rng(&[9]);
    for dims in [vec![3, 7, 5, 2], vec![6, 4, 1], vec![2, 3]] {
        let mut net = Mlp::init(&dims, 1.0, &mut rng);
        net.params.iter_mut().for_each(|p| *p += rng.gen_range(-0.5..0.5));
        let batch = 4;
        let x: Vec<f64> = (0..batch * dims[0]).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y = net.forward(&x, batch).unwrap();
        for b in 0..batch {
            let want = scalar_forward(&dims, &net.params, &x[b * dims[0]..(b + 1) * dims[0]]);
            let got = &y[b * dims[dims.len() - 1]..(b + 1) * dims[dims.len() - 1]];
            for (g, w) in got.iter().zip(&want) {
                assert_abs_diff_eq!(*g, *w, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn mlp_trivial_cases() {
    let net = Mlp::zeros(&[3, 4, 2]);
    assert_eq!(net.forward(&[1.0, 2.0, 3.0], 1).unwrap(), vec![0.0, 0.0]);
    let mut id = Mlp::zeros(&[3, 3]);
    for i in 0..3 {
        id.params[i * 3 + i] = 1.0;
    }
    assert_eq!(id.forward(&[1.5, -2.0, 0.25], 1).unwrap(), vec![1.5, -2.0, 0.25]);
    assert!(id.forward(&[1.0, 2.0], 1).is_err());
}

#[test]
fn linear_layer_gradient_is_outer_product() {
    let mut rng = stream_rng(&[4]);
    let net = Mlp::init(&[3, 2], 1.0, &mut rng);
    let x = [0.5, -1.0, 2.0];
    let up = [0.3, -0.7];
    let mut cache = ForwardCache::default();
    net.forward_cached(&x, 1, &mut cache).unwrap();
    let mut g = vec![0.0; net.n_params()];
    net.backward(&cache, &up, &mut g);
    for o in 0..2 {
        for i in 0..3 {
            assert_abs_diff_eq!(g[o * 3 + i], up[o] * x[i], epsilon = 1e-15);
        }
        assert_abs_diff_eq!(g[6 + o], up[o], epsilon = 1e-15);
    }
    let mut z = vec![0.0; net.n_params()];
    net.backward(&cache, &[0.0, 0.0], &mut z);
    assert!(z.iter().all(|v| *v == 0.0));
}

#[test]
fn backward_matches_finite_differences() {
    for seed in 0..20 {
        assert!(mse_fd_max_rel_err(seed) < 1e-4, "seed {seed}");
    }
}

#[test]
fn gaussian_closed_forms() {
    let ls = [0.3, -0.2];
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    assert_abs_diff_eq!(gaussian_log_prob(&[1.0, 2.0], &ls, &[1.0, 2.0]), -0.1 - 2.0 * half_log_2pi, epsilon = 1e-12);
    assert_abs_diff_eq!(gaussian_log_prob(&[0.0], &[0.0], &[1.0]), -0.5 - half_log_2pi, epsilon = 1e-12);
    assert_abs_diff_eq!(gaussian_entropy(&[0.0, 0.0]), (2.0 * PI * std::f64::consts::E).ln(), epsilon = 1e-12);
}

#[test]
fn normalizer_matches_two_pass_statistics() {
    let mut rng = stream_rng(&[12]);
    let data: Vec<Vec<f64>> = (0..500).map(|_| (0..4).map(|d| rng.gen_range(-3.0..3.0) * (d + 1) as f64 + 10.0).collect()).collect();
    let mut n = RunningNormalizer::new(4);
    data.iter().for_each(|r| n.update(r));
    let var = n.variance();
    for d in 0..4 {
        let m = data.iter().map(|r| r[d]).sum::<f64>() / 500.0;
        let v = data.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / 500.0;
        assert!(((n.mean[d] - m) / m).abs() < 1e-10);
        assert!(((var[d] - v) / v).abs() < 1e-10);
    }
}

#[test]
fn gae_closed_forms() {
    let r = [1.0, -0.5, 2.0, 0.3];
    let v = [0.2, 0.4, -0.1, 0.7];
    let dones = [false, false, false, true];
    let (a, ret) = compute_gae(&r, &v, &dones, 0.0, 0.95);
    for t in 0..4 {
        assert_abs_diff_eq!(a[t], r[t] - v[t], epsilon = 1e-15);
        assert_abs_diff_eq!(ret[t], a[t] + v[t], epsilon = 1e-15);
    }
    let (a, _) = compute_gae(&r, &[0.0; 4], &dones, 0.9, 1.0);
    for t in 0..4 {
        let togo: f64 = (t..4).map(|k| 0.9f64.powi((k - t) as i32) * r[k]).sum();
        assert_abs_diff_eq!(a[t], togo, epsilon = 1e-12);
    }
    let mut rng = stream_rng(&[21]);
    let r: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (a, _) = compute_gae(&r, &v, &[false, false, false, false, true], 0.95, 0.95);
    for (x, y) in a.iter().zip(brute_gae(&r, &v, 0.95, 0.95)) {
        assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
    }
}

#[test]
fn single_task_allocation_is_41_episodes() {
    let task = TaskSpec::lift("l", [0.45, 0.0, 0.0], 0.2, 100, &JitterConfig::default(), &plant()).unwrap();
    let alloc = allocate_episodes(std::slice::from_ref(&task), 4096);
    assert_eq!(alloc.len(), 41);
    assert_eq!(alloc.len() * task.horizon, 4100);
}

#[test]
fn ppo_loss_at_the_old_policy() {
    let (agent, obs, actions, _, adv, ret) = ppo_instance(0);
    let means = agent.policy.net.forward(&obs, 8).unwrap();
    let lpo: Vec<f64> = (0..8)
        .map(|i| gaussian_log_prob(&means[i * 2..i * 2 + 2], &agent.policy.log_std, &actions[i * 2..i * 2 + 2]))
        .collect();
    let mb = Minibatch { obs: &obs, actions: &actions, log_prob_old: &lpo, advantages: &adv, returns: &ret };
    let mut g = PpoGrads::zeros(&agent);
    let terms = ppo_loss_and_grad(&agent, &mb, &PpoConfig::default(), &mut g, &mut LossWorkspace::default()).unwrap();
    assert_eq!(terms.clip_fraction, 0.0);
    assert!(terms.approx_kl.abs() < 1e-15);
    assert_abs_diff_eq!(terms.policy, -adv.iter().sum::<f64>() / 8.0, epsilon = 1e-12);
}

#[test]
fn ppo_surrogate_uses_the_clipped_ratio() {
    let (agent, obs, actions, _, _, ret) = ppo_instance(1);
    let means = agent.policy.net.forward(&obs, 8).unwrap();
    let eps = 0.2f64;
    // every ratio at 1 + 2 eps with positive advantages
    let lpo: Vec<f64> = (0..8)
        .map(|i| {
            gaussian_log_prob(&means[i * 2..i * 2 + 2], &agent.policy.log_std, &actions[i * 2..i * 2 + 2])
                - (1.0 + 2.0 * eps).ln()
        })
        .collect();
    let adv = vec![0.7; 8];
    let mb = Minibatch { obs: &obs, actions: &actions, log_prob_old: &lpo, advantages: &adv, returns: &ret };
    let mut g = PpoGrads::zeros(&agent);
    let terms = ppo_loss_and_grad(&agent, &mb, &PpoConfig::default(), &mut g, &mut LossWorkspace::default()).unwrap();
    assert_abs_diff_eq!(terms.policy, -(1.0 + eps) * 0.7, epsilon = 1e-12);
    assert_eq!(terms.clip_fraction, 1.0);
    // clipped samples carry no policy-mean gradient
    assert!(g.policy.iter().all(|v| *v == 0.0));
}

#[test]
fn ppo_gradient_matches_finite_differences() {
    for seed in 0..10 {
        assert!(ppo_fd_max_rel_err(seed) < 1e-4, "seed {seed}");
    }
}

fn decomp(cols: &[Vec<f64>]) -> SynergyDecomposition {
    let (n, k) = (cols[0].len(), cols.len());
    let mut w = vec![0.0; n * k];
    for (j, c) in cols.iter().enumerate() {
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..n {
            w[i * k + j] = c[i] / norm;
        }
    }
    SynergyDecomposition { n_muscles: n, k, n_samples: 0, w, h: vec![], vaf: 0.0, iterations_used: 0, converged: true }
}

#[test]
fn vaf_and_overlap_hand_examples() {
    let a = [1.0, 0.0, 0.0, 1.0];
    assert_abs_diff_eq!(vaf(&a, &[1.0, 0.0], &[1.0, 0.0], 2, 1, 2).unwrap(), 50.0, epsilon = 1e-12);
    assert_abs_diff_eq!(vaf(&a, &[1.0, 0.0, 0.0, 1.0], &a, 2, 2, 2).unwrap(), 100.0, epsilon = 1e-12);
    assert_abs_diff_eq!(vaf(&a, &[0.0, 0.0], &[0.0, 0.0], 2, 1, 2).unwrap(), 0.0, epsilon = 1e-12);

    // cosines 0.95, 0.85, 0.3 on the diagonal, tiny off-diagonal
    let e = |i: usize, c: f64, j: usize| {
        let mut v = vec![0.0; 6];
        v[i] = c;
        v[j] = (1.0 - c * c).sqrt();
        v
    };
    let wi = decomp(&[e(0, 1.0, 3), e(1, 1.0, 4), e(2, 1.0, 5)]);
    let wj = decomp(&[e(0, 0.95, 3), e(1, 0.85, 4), e(2, 0.3, 5)]);
    let (count, pairs) = synergy_overlap(&wi, &wj, 0.8).unwrap();
    assert_eq!(count, 2);
    assert_abs_diff_eq!(pairs[0].2, 0.95, epsilon = 1e-12);
    assert_abs_diff_eq!(pairs[1].2, 0.85, epsilon = 1e-12);
}

#[test]
fn nnmf_full_rank_reconstructs() {
    let mut rng = stream_rng(&[8]);
    let (m, n) = (4, 30);
    let data: Vec<f64> = (0..m * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let a = ActivationMatrix::from_data(m, n, data).unwrap();
    let d = nnmf(&a, 4, 500, 1e-9, 1).unwrap().decomposition;
    assert!(d.vaf >= 99.0, "{}", d.vaf);
}

#[test]
fn fresh_normalizer_is_identity() {
    let n = RunningNormalizer::new(3);
    assert_eq!(n.normalize(&[1.0, -2.0, 3.0]), vec![1.0, -2.0, 3.0]);
    let agent = ActorCritic::new(39, 9, &[8], -0.7, &mut stream_rng(&[1]));
    assert_eq!(agent.obs_dim(), env::ObservationSpec::new(&plant(), &EnvConfig::default()).dim());
}
