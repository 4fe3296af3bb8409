//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use dexprior::agent::{stream_rng, ActorCritic};
use dexprior::nn::{ForwardCache, Mlp};
use dexprior::ppo::{ppo_loss_and_grad, LossWorkspace, Minibatch, PpoConfig, PpoGrads};
use dexprior::workflows::mse_loss_and_grad;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Scalar-by-scalar MLP evaluation straight from the flat parameter layout:
/// per layer, `W[out][in]` row-major followed by the bias.
pub fn scalar_forward(dims: &[usize], params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut off = 0;
    let layers = dims.len() - 1;
    for l in 0..layers {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let w = &params[off..off + n_in * n_out];
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let mut next = vec![0.0; n_out];
        for o in 0..n_out {
            let mut z = b[o];
            for i in 0..n_in {
                z += w[o * n_in + i] * h[i];
            }
            next[o] = if l + 1 < layers { z.tanh() } else { z };
        }
        h = next;
    }
    h
}

/// GAE by the explicit double sum `A_t = Σ_l (γλ)^l δ_{t+l}` for one episode
/// whose value after the final step is 0.
pub fn brute_gae(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let delta = |t: usize| r[t] + gamma * if t + 1 < n { v[t + 1] } else { 0.0 } - v[t];
    (0..n).map(|t| (t..n).map(|k| (gamma * lambda).powi((k - t) as i32) * delta(k)).sum()).collect()
}

/// Relative error with an absolute floor for entries that are both tiny.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs() * 1e3
    } else {
        (a - b).abs() / scale
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Builds a tiny actor-critic and an 8-sample minibatch whose old
/// log-probabilities place every ratio at least 0.05 away from the clip
/// kinks, so central differences never straddle a non-smooth point.
pub fn ppo_instance(seed: u64) -> (ActorCritic, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = stream_rng(&[seed, 77]);
    let (od, ad, b) = (4, 2, 8);
    let mut agent = ActorCritic::new(od, ad, &[5, 3], -0.3, &mut rng);
    for p in agent.policy.net.params.iter_mut().chain(agent.value.params.iter_mut()) {
        *p += 0.3 * normal(&mut rng);
    }
    for s in agent.policy.log_std.iter_mut() {
        *s = -0.5 + 0.3 * normal(&mut rng);
    }
    let obs: Vec<f64> = (0..b * od).map(|_| normal(&mut rng)).collect();
    let actions: Vec<f64> = (0..b * ad).map(|_| normal(&mut rng)).collect();
    let means = agent.policy.net.forward(&obs, b).unwrap();
    let targets = [0.6, 0.9, 1.0, 1.05, 1.5, 0.95, 1.3, 0.7];
    let log_prob_old: Vec<f64> = (0..b)
        .map(|i| {
            let lp = dexprior::nn::gaussian_log_prob(
                &means[i * ad..(i + 1) * ad],
                &agent.policy.log_std,
                &actions[i * ad..(i + 1) * ad],
            );
            lp - f64::ln(targets[(i + seed as usize) % targets.len()])
        })
        .collect();
    let adv: Vec<f64> = (0..b).map(|_| normal(&mut rng)).collect();
    let ret: Vec<f64> = (0..b).map(|_| normal(&mut rng)).collect();
    (agent, obs, actions, log_prob_old, adv, ret)
}

fn ppo_total(agent: &ActorCritic, mb: &Minibatch<'_>, cfg: &PpoConfig) -> f64 {
    let mut g = PpoGrads::zeros(agent);
    let mut ws = LossWorkspace::default();
    ppo_loss_and_grad(agent, mb, cfg, &mut g, &mut ws).unwrap().total
}

/// Maximum relative error between the analytic PPO gradient and central
/// differences (h = 1e-5) over every parameter of one random instance.
pub fn ppo_fd_max_rel_err(seed: u64) -> f64 {
    let cfg = PpoConfig::default();
    let (mut agent, obs, actions, lpo, adv, ret) = ppo_instance(seed);
    let mb = Minibatch { obs: &obs, actions: &actions, log_prob_old: &lpo, advantages: &adv, returns: &ret };
    let mut grads = PpoGrads::zeros(&agent);
    let mut ws = LossWorkspace::default();
    ppo_loss_and_grad(&agent, &mb, &cfg, &mut grads, &mut ws).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    macro_rules! sweep {
        ($field:expr, $g:expr) => {
            for i in 0..$g.len() {
                let orig = $field[i];
                $field[i] = orig + h;
                let up = ppo_total(&agent, &mb, &cfg);
                $field[i] = orig - h;
                let down = ppo_total(&agent, &mb, &cfg);
                $field[i] = orig;
                worst = worst.max(rel_err($g[i], (up - down) / (2.0 * h)));
            }
        };
    }
    sweep!(agent.policy.net.params, grads.policy);
    sweep!(agent.policy.log_std, grads.log_std);
    sweep!(agent.value.params, grads.value);
    worst
}

/// Same check for the distillation mean-squared-error loss.
pub fn mse_fd_max_rel_err(seed: u64) -> f64 {
    let mut rng = stream_rng(&[seed, 91]);
    let dims = [4, 6, 3];
    let mut net = Mlp::init(&dims, 1.0, &mut rng);
    for p in net.params.iter_mut() {
        *p += 0.2 * normal(&mut rng);
    }
    let b = 7;
    let obs: Vec<f64> = (0..b * 4).map(|_| normal(&mut rng)).collect();
    let tgt: Vec<f64> = (0..b * 3).map(|_| normal(&mut rng)).collect();
    let mut cache = ForwardCache::default();
    let mut grad = vec![0.0; net.n_params()];
    mse_loss_and_grad(&net, &obs, &tgt, b, &mut grad, &mut cache).unwrap();
    let mut scratch = vec![0.0; net.n_params()];
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..net.n_params() {
        let orig = net.params[i];
        net.params[i] = orig + h;
        let up = mse_loss_and_grad(&net, &obs, &tgt, b, &mut scratch, &mut cache).unwrap();
        net.params[i] = orig - h;
        let down = mse_loss_and_grad(&net, &obs, &tgt, b, &mut scratch, &mut cache).unwrap();
        net.params[i] = orig;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * h)));
    }
    worst
}
