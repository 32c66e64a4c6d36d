//! Rank correlation and the binary agreement test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcm::{pcm_binarize, PairComparisonMatrix};

/// Average (mid) ranks, 1-based.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two observations"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of tie-averaged ranks.
pub fn srocc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::UndefinedCorrelation("NaN input"));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// Fraction of compared off-diagonal entries where the score-derived and
    /// ground-truth binary matrices agree.
    pub proportion: f64,
    /// Ordered off-diagonal entries compared.
    pub compared: usize,
    /// Unordered pairs skipped for lack of ground-truth comparisons.
    pub missing: usize,
    /// Unordered pairs whose ground-truth proportion was exactly 0.5.
    pub truth_ties: usize,
    /// Compared unordered pairs with exactly equal scores.
    pub score_ties: usize,
}

/// Agreement between a ground-truth matrix binarized at 0.5 and the binary
/// matrix implied by `scores` (`1` iff `scores[i] > scores[j]`).
pub fn agreement_proportion(pcm_gt: &PairComparisonMatrix, scores: &[f64]) -> Result<Agreement> {
    let n = pcm_gt.n();
    if scores.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: scores.len(),
        });
    }
    let truth = pcm_binarize(pcm_gt, 0.5);
    let mut same = 0usize;
    let mut compared = 0usize;
    let mut score_ties = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let (Some(tij), Some(tji)) = (truth.get(i, j), truth.get(j, i)) else {
                continue;
            };
            if scores[i] == scores[j] {
                score_ties += 1;
            }
            let cij = scores[i] > scores[j];
            let cji = scores[j] > scores[i];
            same += usize::from(cij == tij) + usize::from(cji == tji);
            compared += 2;
        }
    }
    if compared == 0 {
        return Err(Error::UndefinedCorrelation("no comparable pairs"));
    }
    Ok(Agreement {
        proportion: same as f64 / compared as f64,
        compared,
        missing: truth.missing.len(),
        truth_ties: truth.ties.len(),
        score_ties,
    })
}
