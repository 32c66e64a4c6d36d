//! Expected-information-gain scoring of candidate pairs and spanning-tree
//! batch selection.
//!
//! The gain of comparing `i` with `j` is the mutual information between the
//! binary outcome and the score difference under the current posterior:
//!
//! ```text
//! U_ij = E[p ln p] + E[q ln q] - E[p] ln E[p] - E[q] ln E[q]
//! ```
//!
//! with `p = P(i > j | s_ij)`, `q = 1 - p`, and `s_ij ~ N(ŝ_i - ŝ_j, v_ij)`
//! where `v_ij = Σ̂_ii + Σ̂_jj - 2Σ̂_ij`. Expectations use Gauss-Hermite
//! quadrature. A batch is the spanning tree of the complete pair graph with
//! maximum total gain, so every stimulus is compared in every batch.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::QuadratureRule;
use crate::scale::{ModelKind, QualityEstimate};

/// Floor on the posterior variance of a score difference.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const P_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledPair {
    pub i: usize,
    pub j: usize,
    pub eig: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingBatch {
    pub iteration: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stimulus_ids: Vec<String>,
    pub pairs: Vec<SampledPair>,
}

impl SamplingBatch {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.pairs
            .iter()
            .any(|p| (p.i == i && p.j == j) || (p.i == j && p.j == i))
    }
}

/// How batch pairs are chosen from the scored pair universe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    /// Maximum-gain spanning tree, truncated or topped up with the best
    /// non-tree pairs to reach the batch size.
    #[default]
    SpanningTree,
    /// Highest-gain pairs regardless of graph structure.
    TopK,
}

/// Mean and standard deviation of the posterior score difference `s_i - s_j`.
pub fn posterior_difference(est: &QualityEstimate, i: usize, j: usize) -> Result<(f64, f64)> {
    let n = est.n();
    if i == j || i >= n || j >= n {
        return Err(Error::InvalidPair(i, j));
    }
    let var = est.cov(i, i) + est.cov(j, j) - 2.0 * est.cov(i, j);
    Ok((est.s_hat[i] - est.s_hat[j], var.max(VARIANCE_FLOOR).sqrt()))
}

/// Expected information gain of one comparison between `i` and `j`.
pub fn pair_eig(est: &QualityEstimate, i: usize, j: usize, rule: &QuadratureRule) -> Result<f64> {
    let (mean, std) = posterior_difference(est, i, j)?;
    let scale = (est.sigma_hat[i].powi(2) + est.sigma_hat[j].powi(2)).sqrt();
    Ok(eig_from_moments(est.model, mean, std, scale, rule))
}

/// Gain for a posterior `N(mean, std²)` on the score difference, where the
/// preference link has combined dispersion `scale`.
pub fn eig_from_moments(
    model: ModelKind,
    mean: f64,
    std: f64,
    scale: f64,
    rule: &QuadratureRule,
) -> f64 {
    let c = std::f64::consts::SQRT_2 * std;
    let mut e_p = 0.0;
    let mut e_plogp = 0.0;
    let mut e_qlogq = 0.0;
    for (&x, &w) in rule.nodes().iter().zip(rule.weights()) {
        let p = model.preference(c * x + mean, scale).clamp(P_CLAMP, 1.0 - P_CLAMP);
        let q = 1.0 - p;
        e_p += w * p;
        e_plogp += w * p * p.ln();
        e_qlogq += w * q * q.ln();
    }
    let norm = std::f64::consts::PI.sqrt();
    let e_p = (e_p / norm).clamp(P_CLAMP, 1.0 - P_CLAMP);
    let e_q = 1.0 - e_p;
    let u = e_plogp / norm + e_qlogq / norm - e_p * e_p.ln() - e_q * e_q.ln();
    u.max(0.0)
}

/// Gains of every unordered pair `(i, j)`, `i < j`, in lexicographic order.
pub fn all_pair_eigs(est: &QualityEstimate, rule: &QuadratureRule) -> Result<Vec<SampledPair>> {
    let n = est.n();
    if n < 2 {
        return Err(Error::TooFewStimuli(n));
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    pairs
        .into_par_iter()
        .map(|(i, j)| pair_eig(est, i, j, rule).map(|eig| SampledPair { i, j, eig }))
        .collect()
}

/// Descending gain, then ascending `(min id, max id)`.
fn by_gain(a: &SampledPair, b: &SampledPair) -> Ordering {
    b.eig
        .total_cmp(&a.eig)
        .then_with(|| (a.i.min(a.j), a.i.max(a.j)).cmp(&(b.i.min(b.j), b.i.max(b.j))))
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when `a` and `b` were already connected.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

/// Kruskal over `edges` in [`by_gain`] order: the spanning tree (forest if
/// the graph is disconnected) maximizing total gain, with deterministic ties.
pub fn maximum_spanning_tree(n: usize, edges: &[SampledPair]) -> Vec<SampledPair> {
    let mut sorted = edges.to_vec();
    sorted.sort_by(by_gain);
    let mut uf = UnionFind::new(n);
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    for e in sorted {
        if uf.union(e.i, e.j) {
            tree.push(e);
            if tree.len() + 1 == n {
                break;
            }
        }
    }
    tree
}

pub fn select_batch(est: &QualityEstimate, n_pc: usize, rule: &QuadratureRule) -> Result<SamplingBatch> {
    select_batch_with(est, n_pc, rule, BatchMode::SpanningTree)
}

/// Scores every pair and picks `n_pc` of them, sorted by descending gain.
pub fn select_batch_with(
    est: &QualityEstimate,
    n_pc: usize,
    rule: &QuadratureRule,
    mode: BatchMode,
) -> Result<SamplingBatch> {
    let n = est.n();
    if n < 2 {
        return Err(Error::TooFewStimuli(n));
    }
    let universe = n * (n - 1) / 2;
    if n_pc == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if n_pc > universe {
        return Err(Error::BatchTooLarge {
            requested: n_pc,
            available: universe,
        });
    }
    let mut scored = all_pair_eigs(est, rule)?;
    let pairs = match mode {
        BatchMode::TopK => {
            scored.sort_by(by_gain);
            scored.truncate(n_pc);
            scored
        }
        BatchMode::SpanningTree => {
            let mut picked = maximum_spanning_tree(n, &scored);
            if n_pc < picked.len() {
                picked.truncate(n_pc);
            } else if n_pc > picked.len() {
                let mut in_tree = vec![false; n * n];
                for e in &picked {
                    in_tree[e.i * n + e.j] = true;
                }
                scored.retain(|e| !in_tree[e.i * n + e.j]);
                scored.sort_by(by_gain);
                picked.extend(scored.into_iter().take(n_pc - picked.len()));
                picked.sort_by(by_gain);
            }
            picked
        }
    };
    Ok(SamplingBatch {
        iteration: 0,
        stimulus_ids: est.stimulus_ids.clone(),
        pairs,
    })
}
