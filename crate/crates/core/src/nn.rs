//! Feed-forward networks with analytic gradients, diagonal Gaussian policy
//! heads, a running observation normalizer, and the Adam/Adadelta optimizers.
//!
//! Batches are row-major `[batch x features]` slices. Layer `l` stores its
//! weight matrix `[out x in]` row-major followed by its `out` biases, all
//! layers concatenated into one flat parameter vector.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
pub const NORMALIZER_CLIP: f64 = 10.0;
const STD_FLOOR: f64 = 1e-8;

/// `C = alpha * A B + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices covering the full strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc,
        );
    }
}

/// Multi-layer perceptron: tanh hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations kept from a forward pass: `acts[0]` is the input batch,
/// `acts[l + 1]` the output of layer `l`.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pub batch: usize,
    pub acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Rows of a `rows x cols` matrix with orthonormal rows (or columns, when
/// `rows > cols`), from modified Gram-Schmidt on Gaussian draws.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (n_vec, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n_vec);
    while vecs.len() < n_vec {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            w[r * cols + c] = gain * if rows <= cols { vecs[r][c] } else { vecs[c][r] };
        }
    }
    w
}

impl Mlp {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        Self { dims: dims.to_vec(), params: vec![0.0; param_count(dims)] }
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || params.len() != param_count(dims) {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for layer dims {dims:?} (need {})",
                params.len(),
                if dims.len() < 2 { 0 } else { param_count(dims) }
            )));
        }
        Ok(Self { dims: dims.to_vec(), params })
    }

    /// Orthogonal weights (gain sqrt 2 on hidden layers, `output_gain` on the
    /// last), zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], output_gain: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(dims);
        let n_layers = net.n_layers();
        let mut off = 0;
        for l in 0..n_layers {
            let (i, o) = (dims[l], dims[l + 1]);
            let gain = if l + 1 == n_layers { output_gain } else { 2f64.sqrt() };
            let w = orthogonal(o, i, gain, rng);
            net.params[off..off + o * i].copy_from_slice(&w);
            off += o * i + o;
        }
        net
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offset(&self, l: usize) -> usize {
        param_count(&self.dims[..=l])
    }

    /// Batched forward pass keeping the activations for [`Mlp::backward`].
    pub fn forward_cached(&self, x: &[f64], batch: usize, cache: &mut ForwardCache) -> Result<()> {
        if x.len() != batch * self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input of length {} for batch {batch} x dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        cache.batch = batch;
        cache.acts.resize_with(self.dims.len(), Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        let n_layers = self.n_layers();
        for l in 0..n_layers {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let off = self.layer_offset(l);
            let w = &self.params[off..off + o * i];
            let b = &self.params[off + o * i..off + o * i + o];
            let (prev, rest) = cache.acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut rest[0];
            out.clear();
            out.resize(batch * o, 0.0);
            for row in out.chunks_exact_mut(o) {
                row.copy_from_slice(b);
            }
            // out[B x o] += input[B x i] * W^T
            gemm(batch, i, o, 1.0, input, i as isize, 1, w, 1, i as isize, 1.0, out, o as isize, 1);
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, batch, &mut cache)?;
        Ok(cache.acts.pop().unwrap())
    }

    /// Accumulates parameter gradients of `sum(upstream * output)` into
    /// `grad` (same layout as `params`).
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64], grad: &mut [f64]) {
        let batch = cache.batch;
        assert_eq!(upstream.len(), batch * self.output_dim());
        assert_eq!(grad.len(), self.params.len());
        let mut delta = upstream.to_vec();
        let mut next = Vec::new();
        for l in (0..self.n_layers()).rev() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let off = self.layer_offset(l);
            let input = &cache.acts[l];
            {
                let (gw, gb) = grad[off..off + o * i + o].split_at_mut(o * i);
                // dW[o x i] += delta^T[o x B] * input[B x i]
                gemm(o, batch, i, 1.0, &delta, 1, o as isize, input, i as isize, 1, 1.0, gw, i as isize, 1);
                for row in delta.chunks_exact(o) {
                    gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
            if l > 0 {
                let w = &self.params[off..off + o * i];
                next.clear();
                next.resize(batch * i, 0.0);
                // dX[B x i] = delta[B x o] * W[o x i]
                gemm(batch, o, i, 1.0, &delta, o as isize, 1, w, i as isize, 1, 0.0, &mut next, i as isize, 1);
                // through tanh of the previous layer
                next.iter_mut().zip(input).for_each(|(g, h)| *g *= 1.0 - h * h);
                std::mem::swap(&mut delta, &mut next);
            }
        }
    }
}

/// Log-density of `action` under `N(mean, diag(exp(log_std))^2)`.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - half_log_2pi
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    let c = 0.5 * (2.0 * PI * std::f64::consts::E).ln();
    log_std.iter().map(|ls| ls + c).sum()
}

/// Samples an action and returns it with its log-probability and the
/// distribution's entropy.
pub fn gaussian_sample<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> (Vec<f64>, f64, f64) {
    let action: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .map(|(m, ls)| {
            let z: f64 = StandardNormal.sample(rng);
            m + ls.exp() * z
        })
        .collect();
    let lp = gaussian_log_prob(mean, log_std, &action);
    (action, lp, gaussian_entropy(log_std))
}

/// Gaussian policy: MLP mean head plus a state-independent log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn init<R: Rng + ?Sized>(dims: &[usize], init_log_std: f64, rng: &mut R) -> Self {
        let net = Mlp::init(dims, 0.01, rng);
        let log_std = vec![init_log_std; net.output_dim()];
        Self { net, log_std }
    }

    pub fn reset_log_std(&mut self, value: f64) {
        self.log_std.iter_mut().for_each(|v| *v = value);
    }

    pub fn clamp_log_std(&mut self) {
        self.log_std.iter_mut().for_each(|v| *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }
}

/// Welford running mean/variance per observation dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNormalizer {
    pub count: f64,
    pub mean: Vec<f64>,
    /// Sum of squared deviations from the running mean.
    pub m2: Vec<f64>,
    pub frozen: bool,
}

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        Self { count: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim], frozen: false }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Population variance; `1` before any data.
    pub fn variance(&self) -> Vec<f64> {
        if self.count > 0.0 {
            self.m2.iter().map(|m| (m / self.count).max(0.0)).collect()
        } else {
            vec![1.0; self.dim()]
        }
    }

    /// Adds one sample unless frozen.
    pub fn update(&mut self, x: &[f64]) {
        if self.frozen {
            return;
        }
        debug_assert_eq!(x.len(), self.dim());
        self.count += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.count;
            *s += d * (v - *m);
        }
    }

    /// Writes the normalized, clipped version of `x` into `out`.
    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        let var = self.variance();
        for (((o, v), m), s2) in out.iter_mut().zip(x).zip(&self.mean).zip(&var) {
            let std = s2.sqrt().max(STD_FLOOR);
            *o = ((v - m) / std).clamp(-NORMALIZER_CLIP, NORMALIZER_CLIP);
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.normalize_into(x, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adadelta {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub sq_grad: Vec<f64>,
    pub sq_delta: Vec<f64>,
}

impl Adadelta {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, rho: 0.95, eps: 1e-6, sq_grad: vec![0.0; n], sq_delta: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.sq_grad.len());
        for i in 0..params.len() {
            let g = grads[i];
            self.sq_grad[i] = self.rho * self.sq_grad[i] + (1.0 - self.rho) * g * g;
            let delta = (self.sq_delta[i] + self.eps).sqrt() / (self.sq_grad[i] + self.eps).sqrt() * g;
            self.sq_delta[i] = self.rho * self.sq_delta[i] + (1.0 - self.rho) * delta * delta;
            params[i] -= self.lr * delta;
        }
    }
}
