//! Muscle-synergy analysis: multiplicative-update NNMF, variance accounted
//! for, and cosine-similarity overlap between synergy sets.
//!
//! Matrices are row-major. An activation matrix is `n_muscles x n_samples`;
//! a decomposition has `W: n_muscles x k` (columns are the synergies) and
//! `H: k x n_samples`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{run_episodes, stream_rng, ActionMode, ActorCritic, EpisodeJob, RecordFlags};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::plant::MusclePlantConfig;
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynergyConfig {
    /// Ranks scanned by the VAF curve.
    pub k_range: Vec<usize>,
    /// Seeded NNMF restarts; the best reconstruction is kept.
    pub repeats: usize,
    /// Rank used for cross-task overlap.
    pub k: usize,
    /// Rollouts per task when recording activations.
    pub rollouts: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Cosine similarity at or above which two synergies count as shared.
    pub threshold: f64,
}

impl Default for SynergyConfig {
    fn default() -> Self {
        Self { k_range: (1..=8).collect(), repeats: 10, k: 4, rollouts: 5, max_iters: 500, tol: 1e-6, threshold: 0.8 }
    }
}

impl SynergyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synergy: {m}")));
        if self.k_range.is_empty() || self.k_range.contains(&0) {
            return bad("k_range must be nonempty and positive");
        }
        if self.repeats == 0 || self.rollouts == 0 || self.k == 0 || self.max_iters == 0 {
            return bad("repeats, rollouts, k and max_iters must be positive");
        }
        if !(self.tol >= 0.0) || !(0.0..=1.0).contains(&self.threshold) {
            return bad("tol must be >= 0 and threshold within [0, 1]");
        }
        Ok(())
    }
}

/// Row-major nonnegative activation data plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub n_muscles: usize,
    pub n_samples: usize,
    pub data: Vec<f64>,
    pub source: String,
    pub task_ids: Vec<String>,
    pub rollouts_per_task: usize,
}

impl ActivationMatrix {
    pub fn from_data(n_muscles: usize, n_samples: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_muscles * n_samples {
            return Err(Error::DimensionMismatch(format!(
                "activation data has {} entries, expected {n_muscles}x{n_samples}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Nnmf("activation matrix must be finite and nonnegative".into()));
        }
        Ok(Self { n_muscles, n_samples, data, source: String::new(), task_ids: Vec::new(), rollouts_per_task: 0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynergyDecomposition {
    pub n_muscles: usize,
    pub k: usize,
    pub n_samples: usize,
    pub w: Vec<f64>,
    pub h: Vec<f64>,
    pub vaf: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

impl SynergyDecomposition {
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_muscles).map(|i| self.w[i * self.k + j]).collect()
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        matmul(&self.w, &self.h, self.n_muscles, self.k, self.n_samples)
    }
}

/// `a (m x k) * b (k x n)`.
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn sq_error(a: &[f64], w: &[f64], h: &[f64], m: usize, k: usize, n: usize) -> f64 {
    matmul(w, h, m, k, n).iter().zip(a).map(|(r, x)| (x - r) * (x - r)).sum()
}

/// Percent of `‖A‖²_F` explained by the reconstruction `W·H`.
pub fn vaf(a: &[f64], w: &[f64], h: &[f64], m: usize, k: usize, n: usize) -> Result<f64> {
    if a.len() != m * n || w.len() != m * k || h.len() != k * n {
        return Err(Error::DimensionMismatch(format!(
            "vaf shapes: A {} entries, W {} and H {} for {m}x{k}x{n}",
            a.len(),
            w.len(),
            h.len()
        )));
    }
    let total: f64 = a.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Err(Error::Nnmf("activation matrix has zero norm".into()));
    }
    Ok(100.0 * (1.0 - sq_error(a, w, h, m, k, n) / total))
}

/// NNMF result together with the squared Frobenius error recorded initially
/// and after every half-update (H, then W).
#[derive(Debug, Clone)]
pub struct NnmfTrace {
    pub decomposition: SynergyDecomposition,
    pub error_history: Vec<f64>,
}

/// Multiplicative update of `x` by `num / den`; entries whose denominator
/// vanishes are left as they are.
fn mu_update(x: &mut [f64], num: &[f64], den: &[f64]) {
    for ((x, n), d) in x.iter_mut().zip(num).zip(den) {
        if *d > 0.0 {
            *x *= n / d;
        }
    }
}

pub fn nnmf(a: &ActivationMatrix, k: usize, max_iters: usize, tol: f64, seed: u64) -> Result<NnmfTrace> {
    let (m, n) = (a.n_muscles, a.n_samples);
    if k == 0 || k > m.min(n) {
        return Err(Error::Nnmf(format!("rank {k} outside 1..={}", m.min(n))));
    }
    let x = &a.data;
    let total: f64 = x.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Err(Error::Nnmf("activation matrix is all zero".into()));
    }

    let mut rng = stream_rng(&[seed, k as u64]);
    let scale = (x.iter().sum::<f64>() / (m * n) as f64 / k as f64).sqrt();
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal).abs()).collect()
    };
    let mut h = draw(k * n);
    let mut w = draw(m * k);

    let mut history = vec![sq_error(x, &w, &h, m, k, n)];
    let mut iterations_used = 0;
    let mut converged = false;
    for _ in 0..max_iters {
        // H <- H * (W^T A) / (W^T W H)
        let wt = transpose(&w, m, k);
        let num = matmul(&wt, x, k, m, n);
        let wtw = matmul(&wt, &w, k, m, k);
        let den = matmul(&wtw, &h, k, k, n);
        mu_update(&mut h, &num, &den);
        history.push(sq_error(x, &w, &h, m, k, n));

        // W <- W * (A H^T) / (W H H^T)
        let ht = transpose(&h, k, n);
        let num = matmul(x, &ht, m, n, k);
        let hht = matmul(&h, &ht, k, n, k);
        let den = matmul(&w, &hht, m, k, k);
        mu_update(&mut w, &num, &den);
        let err = sq_error(x, &w, &h, m, k, n);
        let prev = history[history.len() - 2];
        history.push(err);
        iterations_used += 1;

        if prev > 0.0 && (prev - err) / prev < tol || err == 0.0 {
            converged = true;
            break;
        }
    }

    for j in 0..k {
        let norm = (0..m).map(|i| w[i * k + j].powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            (0..m).for_each(|i| w[i * k + j] /= norm);
            h[j * n..(j + 1) * n].iter_mut().for_each(|v| *v *= norm);
        }
    }
    let vaf = vaf(x, &w, &h, m, k, n)?;
    Ok(NnmfTrace {
        decomposition: SynergyDecomposition { n_muscles: m, k, n_samples: n, w, h, vaf, iterations_used, converged },
        error_history: history,
    })
}

/// Best-VAF decomposition over `repeats` seeded restarts.
pub fn best_nnmf(a: &ActivationMatrix, k: usize, cfg: &SynergyConfig, seed: u64) -> Result<SynergyDecomposition> {
    let runs: Vec<SynergyDecomposition> = (0..cfg.repeats.max(1))
        .into_par_iter()
        .map(|r| nnmf(a, k, cfg.max_iters, cfg.tol, seed.wrapping_mul(1_000_003).wrapping_add(r as u64)).map(|t| t.decomposition))
        .collect::<Result<_>>()?;
    // First maximum in restart order, independent of scheduling.
    let mut best = runs.into_iter();
    let first = best.next().expect("at least one restart");
    Ok(best.fold(first, |b, d| if d.vaf > b.vaf { d } else { b }))
}

/// `(k, VAF)` for each requested rank. Reported values are the best over
/// restarts and over all ranks up to `k`, since a rank-k factorization can
/// always reproduce a smaller one by padding with a zero synergy.
pub fn vaf_curve(a: &ActivationMatrix, k_range: &[usize], cfg: &SynergyConfig, seed: u64) -> Result<Vec<(usize, f64)>> {
    let mut ks = k_range.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut out = Vec::with_capacity(ks.len());
    let mut running = f64::NEG_INFINITY;
    for k in ks {
        running = running.max(best_nnmf(a, k, cfg, seed)?.vaf);
        out.push((k, running));
    }
    Ok(out)
}

/// A matched synergy pair: column of the first set, column of the second,
/// cosine similarity.
pub type SynergyPair = (usize, usize, f64);

/// Greedy one-to-one matching by descending cosine similarity; returns the
/// number of matched pairs at or above `threshold` and those pairs.
pub fn synergy_overlap(
    wi: &SynergyDecomposition,
    wj: &SynergyDecomposition,
    threshold: f64,
) -> Result<(usize, Vec<SynergyPair>)> {
    if wi.n_muscles != wj.n_muscles {
        return Err(Error::DimensionMismatch(format!(
            "synergy columns have {} and {} muscles",
            wi.n_muscles, wj.n_muscles
        )));
    }
    let ci: Vec<Vec<f64>> = (0..wi.k).map(|j| wi.column(j)).collect();
    let cj: Vec<Vec<f64>> = (0..wj.k).map(|j| wj.column(j)).collect();
    let mut cands: Vec<SynergyPair> = Vec::with_capacity(wi.k * wj.k);
    for (a, u) in ci.iter().enumerate() {
        for (b, v) in cj.iter().enumerate() {
            cands.push((a, b, u.iter().zip(v).map(|(x, y)| x * y).sum()));
        }
    }
    cands.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    let mut used_i = vec![false; wi.k];
    let mut used_j = vec![false; wj.k];
    let mut pairs = Vec::new();
    for (a, b, cs) in cands {
        if used_i[a] || used_j[b] {
            continue;
        }
        used_i[a] = true;
        used_j[b] = true;
        if cs >= threshold {
            pairs.push((a, b, cs));
        }
    }
    Ok((pairs.len(), pairs))
}

/// Records muscle activations from deterministic rollouts of `agent` on `task`.
pub fn activation_matrix(
    agent: &ActorCritic,
    task: &TaskSpec,
    plant: &MusclePlantConfig,
    env_cfg: &EnvConfig,
    rollouts: usize,
    seed: u64,
) -> Result<ActivationMatrix> {
    let jobs: Vec<EpisodeJob<'_>> =
        (0..rollouts).map(|r| EpisodeJob { task, task_index: 0, key: vec![seed, 0x5359_4E, r as u64] }).collect();
    let flags = RecordFlags { activations: true, ..Default::default() };
    let records =
        run_episodes(agent, &agent.normalizer, &jobs, plant, env_cfg, ActionMode::Deterministic, 0.0, flags)?;
    let cols: Vec<&Vec<f64>> = records.iter().flat_map(|r| r.activations.iter()).collect();
    let (m, n) = (plant.n_muscles, cols.len());
    let mut data = vec![0.0; m * n];
    for (t, a) in cols.iter().enumerate() {
        for i in 0..m {
            data[i * n + t] = a[i];
        }
    }
    let mut am = ActivationMatrix::from_data(m, n, data)?;
    am.task_ids = vec![task.id.clone()];
    am.rollouts_per_task = rollouts;
    Ok(am)
}

/// Per-task decompositions and their pairwise overlap counts.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix {
    pub task_ids: Vec<String>,
    pub decompositions: Vec<SynergyDecomposition>,
    pub counts: Vec<Vec<usize>>,
}

impl OverlapMatrix {
    pub fn from_decompositions(task_ids: Vec<String>, decompositions: Vec<SynergyDecomposition>, threshold: f64) -> Result<Self> {
        let n = decompositions.len();
        let mut counts = vec![vec![0; n]; n];
        for i in 0..n {
            for j in i..n {
                let (c, _) = synergy_overlap(&decompositions[i], &decompositions[j], threshold)?;
                counts[i][j] = c;
                counts[j][i] = c;
            }
        }
        Ok(Self { task_ids, decompositions, counts })
    }

    /// Mean over unordered pairs of distinct tasks; `None` with fewer than two.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let n = self.counts.len();
        if n < 2 {
            return None;
        }
        let sum: usize = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| self.counts[i][j]).sum();
        Some(sum as f64 / (n * (n - 1) / 2) as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task");
        for id in &self.task_ids {
            s.push(',');
            s.push_str(id);
        }
        s.push('\n');
        for (id, row) in self.task_ids.iter().zip(&self.counts) {
            s.push_str(id);
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Synergy overlap across `tasks`. `agents` holds either one policy shared by
/// all tasks or one policy per task (for per-task experts).
#[allow(clippy::too_many_arguments)]
pub fn cross_task_overlap(
    agents: &[&ActorCritic],
    tasks: &[TaskSpec],
    plant: &MusclePlantConfig,
    env_cfg: &EnvConfig,
    cfg: &SynergyConfig,
    seed: u64,
) -> Result<OverlapMatrix> {
    if agents.len() != 1 && agents.len() != tasks.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} policies for {} tasks; expected one shared policy or one per task",
            agents.len(),
            tasks.len()
        )));
    }
    let decomps = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let agent = agents[if agents.len() == 1 { 0 } else { i }];
            let a = activation_matrix(agent, task, plant, env_cfg, cfg.rollouts, seed)?;
            best_nnmf(&a, cfg.k, cfg, seed.wrapping_add(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    OverlapMatrix::from_decompositions(tasks.iter().map(|t| t.id.clone()).collect(), decomps, cfg.threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decomp(n: usize, cols: &[&[f64]]) -> SynergyDecomposition {
        let k = cols.len();
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
    fn vaf_hand_example() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let w = [1.0, 0.0];
        let h = [1.0, 0.0];
        assert!((vaf(&a, &w, &h, 2, 1, 2).unwrap() - 50.0).abs() < 1e-12);
        assert!((vaf(&a, &[0.0, 0.0], &h, 2, 1, 2).unwrap()).abs() < 1e-12);
        assert!(vaf(&[0.0; 4], &w, &h, 2, 1, 2).is_err());
    }

    #[test]
    fn rank_one_is_recovered() {
        let u = [0.2, 0.5, 0.9];
        let v = [1.0, 0.3, 0.0, 0.7, 0.4];
        let data: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let a = ActivationMatrix::from_data(3, 5, data).unwrap();
        let t = nnmf(&a, 1, 500, 1e-6, 3).unwrap();
        assert!(t.decomposition.vaf >= 99.9);
        let norm: f64 = t.decomposition.column(0).iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_out_of_range_rejected() {
        let a = ActivationMatrix::from_data(2, 3, vec![1.0; 6]).unwrap();
        assert!(nnmf(&a, 0, 10, 1e-6, 0).is_err());
        assert!(nnmf(&a, 3, 10, 1e-6, 0).is_err());
        assert!(ActivationMatrix::from_data(2, 3, vec![-1.0; 6]).is_err());
    }

    #[test]
    fn overlap_crafted_cosines() {
        let e = |i: usize| {
            let mut v = vec![0.0; 6];
            v[i] = 1.0;
            v
        };
        let a = decomp(6, &[&e(0), &e(1), &e(2)]);
        let mix = |c: f64, i: usize, j: usize| {
            let mut v = vec![0.0; 6];
            v[i] = c;
            v[j] = (1.0 - c * c).sqrt();
            v
        };
        let b = decomp(6, &[&mix(0.95, 0, 3), &mix(0.85, 1, 4), &mix(0.3, 2, 5)]);
        let (count, pairs) = synergy_overlap(&a, &b, 0.8).unwrap();
        assert_eq!(count, 2);
        assert_eq!(pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(0, 0), (1, 1)]);
        assert_eq!(synergy_overlap(&a, &a, 0.8).unwrap().0, 3);
        let orth = decomp(6, &[&e(3), &e(4), &e(5)]);
        assert_eq!(synergy_overlap(&a, &orth, 0.8).unwrap().0, 0);
    }
}
