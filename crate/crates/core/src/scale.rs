//! Maximum-likelihood scale recovery from a pair comparison matrix.
//!
//! Three pairwise models are supported:
//!
//! * Thurstone Case III: `P(i > j) = Φ((s_i - s_j) / sqrt(σ_i² + σ_j²))` with a
//!   free dispersion per stimulus.
//! * Thurstone Case V: the same with every `σ_i = 1/√2`, so `P(i > j) = Φ(s_i - s_j)`.
//! * Bradley-Terry: `P(i > j) = 1 / (1 + exp(-(s_i - s_j)))`.
//!
//! The Case III likelihood is invariant under `(s, σ) -> (c·s + d, c·σ)`, so
//! returned estimates are normalized to `mean(s) = 0` and `mean(σ²) = 1`.
//! Case V and Bradley-Terry estimates are centered only.
//!
//! Dispersions are optimized on a log scale (`σ = exp(t)`), and a symmetric
//! pseudocount is added to every pair before fitting so that one-sided pairs
//! keep a finite maximizer.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;
use crate::optim;
use crate::pcm::PairComparisonMatrix;

const MAX_POLISH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Case3,
    Case5,
    Bt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Case3, ModelKind::Case5, ModelKind::Bt];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Case3 => "case3",
            ModelKind::Case5 => "case5",
            ModelKind::Bt => "bt",
        }
    }

    /// Fixed per-stimulus dispersion for models that do not fit one.
    pub fn fixed_sigma(self) -> f64 {
        match self {
            ModelKind::Case3 | ModelKind::Case5 => FRAC_1_SQRT_2,
            ModelKind::Bt => 1.0,
        }
    }

    /// Preference probability for a score difference `diff` whose combined
    /// dispersion is `scale = sqrt(σ_i² + σ_j²)`.
    pub fn preference(self, diff: f64, scale: f64) -> f64 {
        match self {
            ModelKind::Case3 | ModelKind::Case5 => normal::cdf(diff / scale),
            ModelKind::Bt => normal::logistic(diff),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "case3" => Ok(ModelKind::Case3),
            "case5" => Ok(ModelKind::Case5),
            "bt" => Ok(ModelKind::Bt),
            other => Err(Error::InvalidConfig(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub pseudocount: f64,
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    /// Maximum number of optimization attempts; attempts after the first
    /// start from perturbed points and run only while none has converged.
    pub restarts: usize,
    pub seed: u64,
    /// Case III only: weight of the penalty `(λ/2)·Σ(ln σ_i − mean ln σ)²`.
    /// Sparse designs otherwise put the likelihood supremum at `σ_i → 0`.
    pub dispersion_ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            pseudocount: 0.5,
            gradient_tolerance: 1e-8,
            max_iterations: 2000,
            restarts: 3,
            seed: 0,
            dispersion_ridge: 1.0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.pseudocount >= 0.0 && self.pseudocount.is_finite()) {
            return Err(Error::InvalidConfig("pseudocount must be >= 0".into()));
        }
        if !(self.dispersion_ridge >= 0.0 && self.dispersion_ridge.is_finite()) {
            return Err(Error::InvalidConfig("dispersion_ridge must be >= 0".into()));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::InvalidConfig("gradient tolerance must be > 0".into()));
        }
        if self.max_iterations == 0 || self.restarts == 0 {
            return Err(Error::InvalidConfig(
                "max_iterations and restarts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Recovered scale. `covariance` is the row-major `n×n` covariance of the
/// scores; `sigma_covariance` is the analogous matrix for the dispersions
/// (Case III only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityEstimate {
    pub model: ModelKind,
    pub stimulus_ids: Vec<String>,
    pub s_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub covariance: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_covariance: Option<Vec<f64>>,
    pub log_likelihood: f64,
    pub converged: bool,
}

impl QualityEstimate {
    pub fn n(&self) -> usize {
        self.s_hat.len()
    }

    #[inline]
    pub fn cov(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.n() + j]
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n(), self.n(), &self.covariance)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stimulus_ids.len();
        for len in [self.s_hat.len(), self.sigma_hat.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        if self.covariance.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                actual: self.covariance.len(),
            });
        }
        if let Some(&bad) = self.sigma_hat.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::InvalidDispersion(bad));
        }
        Ok(())
    }
}

/// `Φ((s_i - s_j) / sqrt(σ_i² + σ_j²))`.
pub fn win_probability(s_i: f64, s_j: f64, sigma_i: f64, sigma_j: f64) -> Result<f64> {
    for s in [sigma_i, sigma_j] {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidDispersion(s));
        }
    }
    Ok(normal::cdf((s_i - s_j) / (sigma_i * sigma_i + sigma_j * sigma_j).sqrt()))
}

fn check_inputs(s: &[f64], sigma: &[f64], pcm: &PairComparisonMatrix) -> Result<()> {
    let n = pcm.n();
    for len in [s.len(), sigma.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    if let Some(&bad) = sigma.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidDispersion(bad));
    }
    Ok(())
}

/// Case III log likelihood `Σ_{i<j} m_ij ln π_ij + m_ji ln(1 - π_ij)` of the
/// raw counts.
pub fn log_likelihood(s: &[f64], sigma: &[f64], pcm: &PairComparisonMatrix) -> Result<f64> {
    check_inputs(s, sigma, pcm)?;
    let pairs = PairData::collect(pcm, 0.0);
    let t: Vec<f64> = sigma.iter().map(|v| v.ln()).collect();
    Ok(Objective::new(ModelKind::Case3, pairs, pcm.n(), 0.0).value(s, &t))
}

/// Analytic gradient of [`log_likelihood`] with respect to `s` and `σ`.
pub fn log_likelihood_gradient(
    s: &[f64],
    sigma: &[f64],
    pcm: &PairComparisonMatrix,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_inputs(s, sigma, pcm)?;
    let n = pcm.n();
    let obj = Objective::new(ModelKind::Case3, PairData::collect(pcm, 0.0), n, 0.0);
    let t: Vec<f64> = sigma.iter().map(|v| v.ln()).collect();
    let mut gs = vec![0.0; n];
    let mut gt = vec![0.0; n];
    obj.value_grad(s, &t, &mut gs, Some(&mut gt));
    // dℓ/dσ = (dℓ/dt) / σ
    let gsigma = gt.iter().zip(sigma).map(|(g, v)| g / v).collect();
    Ok((gs, gsigma))
}

/// Second derivatives of the Case III log likelihood (raw counts) with respect
/// to the scores, at fixed dispersions.
pub fn score_hessian(s: &[f64], sigma: &[f64], pcm: &PairComparisonMatrix) -> Result<DMatrix<f64>> {
    check_inputs(s, sigma, pcm)?;
    let obj = Objective::new(ModelKind::Case3, PairData::collect(pcm, 0.0), pcm.n(), 0.0);
    Ok(obj.score_hessian(s, sigma))
}

/// Second derivatives of the Case III log likelihood (raw counts) with respect
/// to the dispersions, at fixed scores.
pub fn dispersion_hessian(
    s: &[f64],
    sigma: &[f64],
    pcm: &PairComparisonMatrix,
) -> Result<DMatrix<f64>> {
    check_inputs(s, sigma, pcm)?;
    let obj = Objective::new(ModelKind::Case3, PairData::collect(pcm, 0.0), pcm.n(), 0.0);
    Ok(obj.dispersion_hessian(s, sigma))
}

/// Bradley-Terry log likelihood of the raw counts.
pub fn bt_log_likelihood(s: &[f64], pcm: &PairComparisonMatrix) -> Result<f64> {
    let ones = vec![1.0; s.len()];
    check_inputs(s, &ones, pcm)?;
    let obj = Objective::new(ModelKind::Bt, PairData::collect(pcm, 0.0), pcm.n(), 0.0);
    Ok(obj.value(s, &[]))
}

/// Covariance of the score estimates from the log-likelihood Hessian:
/// the leading `n×n` block of `[[-H, 1], [1', 0]]⁻¹`.
pub fn covariance_of_estimates(hessian: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = hessian.nrows();
    if hessian.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: hessian.ncols(),
        });
    }
    bordered_inverse(hessian, &DVector::from_element(n, 1.0))
}

/// Leading block of `[[-H, v], [v', 0]]⁻¹`.
fn bordered_inverse(hessian: &DMatrix<f64>, border: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = hessian.nrows();
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(-hessian));
    for k in 0..n {
        aug[(k, n)] = border[k];
        aug[(n, k)] = border[k];
    }
    let inv = aug.lu().try_inverse().ok_or(Error::SingularInformation)?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularInformation);
    }
    let block = inv.view((0, 0), (n, n)).into_owned();
    // Symmetrize away LU round-off.
    Ok((&block + block.transpose()) * 0.5)
}

pub fn fit_thurstone_case3(pcm: &PairComparisonMatrix, opts: &FitOptions) -> Result<QualityEstimate> {
    fit(ModelKind::Case3, pcm, opts, None)
}

pub fn fit_thurstone_case5(pcm: &PairComparisonMatrix, opts: &FitOptions) -> Result<QualityEstimate> {
    fit(ModelKind::Case5, pcm, opts, None)
}

pub fn fit_bradley_terry(pcm: &PairComparisonMatrix, opts: &FitOptions) -> Result<QualityEstimate> {
    fit(ModelKind::Bt, pcm, opts, None)
}

/// Fits `model` to `pcm`, optionally warm-starting from a previous estimate
/// over the same stimuli.
pub fn fit(
    model: ModelKind,
    pcm: &PairComparisonMatrix,
    opts: &FitOptions,
    warm_start: Option<&QualityEstimate>,
) -> Result<QualityEstimate> {
    fit_traced(model, pcm, opts, warm_start).map(|(est, _)| est)
}

/// Like [`fit`], also returning the maximized objective (log likelihood plus
/// the dispersion penalty) after every accepted step of the winning attempt.
pub fn fit_traced(
    model: ModelKind,
    pcm: &PairComparisonMatrix,
    opts: &FitOptions,
    warm_start: Option<&QualityEstimate>,
) -> Result<(QualityEstimate, Vec<f64>)> {
    opts.validate()?;
    let n = pcm.n();
    if n < 2 {
        return Err(Error::TooFewStimuli(n));
    }
    let pairs = PairData::collect(pcm, opts.pseudocount);
    check_connected(pcm, &pairs)?;
    let obj = Objective::new(model, pairs, n, opts.dispersion_ridge);
    let free_sigma = model == ModelKind::Case3;
    let dim = if free_sigma { 2 * n } else { n };
    // Scale-free objective: mean negative log likelihood per unit of mass.
    let mass: f64 = obj.pairs.iter().map(|p| p.a + p.b).sum();
    let norm = 1.0 / mass;

    let warm = warm_start.filter(|est| est.stimulus_ids == pcm.ids() && est.model == model);
    let start = match warm {
        Some(est) => {
            let mut x = est.s_hat.clone();
            if free_sigma {
                x.extend(est.sigma_hat.iter().map(|v| v.ln()));
            }
            x
        }
        None => obj.initial_point(),
    };

    let stop = optim::Options {
        gradient_tolerance: opts.gradient_tolerance,
        max_iterations: opts.max_iterations,
    };
    let run = |x0: &[f64]| {
        let mut scratch_s = vec![0.0; n];
        let mut scratch_t = vec![0.0; if free_sigma { n } else { 0 }];
        let outcome = optim::minimize(
            |x, g| {
                let (s, t) = x.split_at(n);
                let mut v = obj.value_grad(
                    s,
                    t,
                    &mut scratch_s,
                    if free_sigma { Some(&mut scratch_t) } else { None },
                );
                v += obj.penalty(t, Some(&mut scratch_t));
                g[..n].copy_from_slice(&scratch_s);
                if free_sigma {
                    g[n..].copy_from_slice(&scratch_t);
                }
                g.iter_mut().for_each(|gi| *gi *= -norm);
                -v * norm
            },
            |x| obj.newton_matrix(x, norm),
            x0,
            stop,
        );
        debug_assert_eq!(outcome.x.len(), dim);
        outcome
    };
    let normalized = |x: &[f64]| {
        let (s, t) = x.split_at(n);
        let mut s_hat = s.to_vec();
        let mut sigma_hat: Vec<f64> = if free_sigma {
            t.iter().map(|v| v.exp()).collect()
        } else {
            vec![model.fixed_sigma(); n]
        };
        normalize(&mut s_hat, if free_sigma { Some(&mut sigma_hat) } else { None });
        (s_hat, sigma_hat)
    };
    // Log likelihood and normalized objective gradient norm at (s, σ).
    let assess = |s_hat: &[f64], sigma_hat: &[f64]| {
        let t_hat: Vec<f64> = if free_sigma {
            sigma_hat.iter().map(|v| v.ln()).collect()
        } else {
            Vec::new()
        };
        let mut gs = vec![0.0; n];
        let mut gt = vec![0.0; t_hat.len()];
        let ll = obj.value_grad(
            s_hat,
            &t_hat,
            &mut gs,
            if free_sigma { Some(&mut gt) } else { None },
        );
        obj.penalty(&t_hat, Some(&mut gt));
        let grad_norm = norm * gs.iter().chain(&gt).map(|g| g * g).sum::<f64>().sqrt();
        (ll, grad_norm)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(usize, optim::Outcome)> = None;
    for attempt in 0..opts.restarts {
        let x0: Vec<f64> = if attempt == 0 {
            start.clone()
        } else {
            let spread = std_dev(&start[..n]).max(0.1);
            start
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    let z: f64 = rng.sample(StandardNormal);
                    v + z * if k < n { 0.1 * spread } else { 0.1 }
                })
                .collect()
        };
        let outcome = run(&x0);
        let better = match &best {
            None => true,
            // Strict comparison keeps the earliest attempt on ties.
            Some((_, b)) => outcome.value < b.value,
        };
        let converged = outcome.converged;
        if better {
            best = Some((attempt, outcome));
        }
        if converged {
            break;
        }
    }
    let (attempt, outcome) = best.expect("at least one attempt");
    let mut trace: Vec<f64> = outcome.trace.iter().map(|v| -v / norm).collect();
    let (mut s_hat, mut sigma_hat) = match warm {
        // The optimizer never left the warm start: keep it verbatim.
        Some(est) if attempt == 0 && outcome.iterations == 0 => {
            (est.s_hat.clone(), est.sigma_hat.clone())
        }
        _ => normalized(&outcome.x),
    };
    let (mut ll, mut grad_norm) = assess(&s_hat, &sigma_hat);
    // Rescaling onto the constraint surface rescales the score gradient, so a
    // point converged before normalization can miss the tolerance after it.
    let mut polish = 0;
    while outcome.converged && grad_norm > opts.gradient_tolerance && polish < MAX_POLISH {
        let mut x0 = s_hat.clone();
        if free_sigma {
            x0.extend(sigma_hat.iter().map(|v| v.ln()));
        }
        let refined = run(&x0);
        trace.extend(refined.trace.iter().skip(1).map(|v| -v / norm));
        (s_hat, sigma_hat) = normalized(&refined.x);
        (ll, grad_norm) = assess(&s_hat, &sigma_hat);
        polish += 1;
    }
    let converged = grad_norm <= opts.gradient_tolerance;

    let h_s = match model {
        ModelKind::Bt => obj.score_hessian(&s_hat, &[]),
        _ => obj.score_hessian(&s_hat, &sigma_hat),
    };
    let cov = covariance_of_estimates(&h_s)?;
    let sigma_covariance = if free_sigma {
        let h_sigma = obj.dispersion_hessian(&s_hat, &sigma_hat);
        // Border with the gradient of the mean(σ²) = 1 constraint.
        let border = DVector::from_iterator(n, sigma_hat.iter().copied());
        bordered_inverse(&h_sigma, &border)
            .ok()
            .map(|m| m.transpose().as_slice().to_vec())
    } else {
        None
    };
    Ok((
        QualityEstimate {
            model,
            stimulus_ids: pcm.ids().to_vec(),
            s_hat,
            sigma_hat,
            // nalgebra is column-major; the transpose gives row-major order.
            covariance: cov.transpose().as_slice().to_vec(),
            sigma_covariance,
            log_likelihood: ll,
            converged,
        },
        trace,
    ))
}

/// Centers scores; when dispersions are present also rescales both so that
/// `mean(σ²) = 1`.
fn normalize(s: &mut [f64], sigma: Option<&mut Vec<f64>>) {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let scale = match sigma {
        Some(sig) => {
            let c = 1.0 / (sig.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            sig.iter_mut().for_each(|v| *v *= c);
            c
        }
        None => 1.0,
    };
    s.iter_mut().for_each(|v| *v = (*v - mean) * scale);
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn check_connected(pcm: &PairComparisonMatrix, pairs: &[PairData]) -> Result<()> {
    let n = pcm.n();
    let mut uf = crate::sampler::UnionFind::new(n);
    for p in pairs {
        uf.union(p.i, p.j);
    }
    let mut comps: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for k in 0..n {
        comps.entry(uf.find(k)).or_default().push(pcm.ids()[k].clone());
    }
    if comps.len() > 1 {
        let mut comps: Vec<Vec<String>> = comps.into_values().collect();
        comps.sort();
        return Err(Error::DisconnectedDesign(comps));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct PairData {
    i: usize,
    j: usize,
    /// Regularized `m_ij`.
    a: f64,
    /// Regularized `m_ji`.
    b: f64,
}

impl PairData {
    fn collect(pcm: &PairComparisonMatrix, pseudocount: f64) -> Vec<PairData> {
        let n = pcm.n();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                let a = pcm.get(i, j) + pseudocount;
                let b = pcm.get(j, i) + pseudocount;
                if a + b > 0.0 {
                    out.push(PairData { i, j, a, b });
                }
            }
        }
        out
    }
}

/// Log terms and inverse Mills ratios of `Φ(z)` and `Φ(-z)`.
#[inline]
fn probit_parts(z: f64) -> (f64, f64, f64, f64) {
    if z.abs() < 30.0 {
        let p = normal::cdf(z);
        let q = normal::cdf(-z);
        let d = normal::pdf(z);
        (p.ln(), q.ln(), d / p, d / q)
    } else {
        (
            normal::ln_cdf(z),
            normal::ln_cdf(-z),
            normal::mills(z),
            normal::mills(-z),
        )
    }
}

/// Per-pair value and first two derivatives with respect to the link argument.
#[inline]
fn pair_terms(model: ModelKind, z: f64, a: f64, b: f64, second: bool) -> (f64, f64, f64) {
    match model {
        ModelKind::Case3 | ModelKind::Case5 => {
            let (lp, lq, mp, mq) = probit_parts(z);
            let f = a * lp + b * lq;
            let g = a * mp - b * mq;
            let h = if second {
                -a * mp * (z + mp) - b * mq * (-z + mq)
            } else {
                0.0
            };
            (f, g, h)
        }
        ModelKind::Bt => {
            let f = a * normal::ln_logistic(z) + b * normal::ln_logistic(-z);
            let p = normal::logistic(z);
            let q = normal::logistic(-z);
            (f, a * q - b * p, -(a + b) * p * q)
        }
    }
}

/// Neumaier summation. The objective is a sum of thousands of terms whose
/// rounding noise otherwise swamps the decrease of a near-converged step.
#[derive(Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

struct Objective {
    model: ModelKind,
    pairs: Vec<PairData>,
    n: usize,
    ridge: f64,
}

impl Objective {
    fn new(model: ModelKind, pairs: Vec<PairData>, n: usize, ridge: f64) -> Self {
        let ridge = if model == ModelKind::Case3 { ridge } else { 0.0 };
        Self {
            model,
            pairs,
            n,
            ridge,
        }
    }

    /// Dispersion penalty (already negated) and its gradient added into `gt`.
    fn penalty(&self, t: &[f64], gt: Option<&mut [f64]>) -> f64 {
        if self.ridge == 0.0 || t.is_empty() {
            return 0.0;
        }
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        if let Some(gt) = gt {
            for (g, v) in gt.iter_mut().zip(t) {
                *g -= self.ridge * (v - mean);
            }
        }
        -0.5 * self.ridge * t.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
    }

    /// Link argument scale `sqrt(σ_i² + σ_j²)` and the shares `σ_i²/d²`, `σ_j²/d²`.
    #[inline]
    fn scale(&self, t: &[f64], i: usize, j: usize) -> (f64, f64, f64) {
        match self.model {
            ModelKind::Case3 => {
                let vi = (2.0 * t[i]).exp();
                let vj = (2.0 * t[j]).exp();
                let d2 = vi + vj;
                (d2.sqrt(), vi / d2, vj / d2)
            }
            _ => (1.0, 0.5, 0.5),
        }
    }

    fn value(&self, s: &[f64], t: &[f64]) -> f64 {
        self.pairs
            .iter()
            .map(|p| {
                let (d, _, _) = self.scale(t, p.i, p.j);
                pair_terms(self.model, (s[p.i] - s[p.j]) / d, p.a, p.b, false).0
            })
            .fold(CompensatedSum::default(), |mut acc, v| {
                acc.add(v);
                acc
            })
            .value()
    }

    /// Value with gradient in `s` and (Case III) in `t = ln σ`.
    fn value_grad(&self, s: &[f64], t: &[f64], gs: &mut [f64], mut gt: Option<&mut [f64]>) -> f64 {
        gs.iter_mut().for_each(|g| *g = 0.0);
        if let Some(gt) = gt.as_deref_mut() {
            gt.iter_mut().for_each(|g| *g = 0.0);
        }
        let mut total = CompensatedSum::default();
        for p in &self.pairs {
            let (d, wi, wj) = self.scale(t, p.i, p.j);
            let z = (s[p.i] - s[p.j]) / d;
            let (f, g, _) = pair_terms(self.model, z, p.a, p.b, false);
            total.add(f);
            gs[p.i] += g / d;
            gs[p.j] -= g / d;
            if let Some(gt) = gt.as_deref_mut() {
                gt[p.i] -= g * z * wi;
                gt[p.j] -= g * z * wj;
            }
        }
        total.value()
    }

    /// Hessian in `s` at the given dispersions (ignored for Bradley-Terry).
    fn score_hessian(&self, s: &[f64], sigma: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n, self.n);
        for p in &self.pairs {
            let d = match self.model {
                ModelKind::Bt => 1.0,
                _ => (sigma[p.i].powi(2) + sigma[p.j].powi(2)).sqrt(),
            };
            let z = (s[p.i] - s[p.j]) / d;
            let (_, _, hz) = pair_terms(self.model, z, p.a, p.b, true);
            let c = hz / (d * d);
            h[(p.i, p.i)] += c;
            h[(p.j, p.j)] += c;
            h[(p.i, p.j)] -= c;
            h[(p.j, p.i)] -= c;
        }
        h
    }

    /// Case III Hessian in `σ` at fixed scores.
    fn dispersion_hessian(&self, s: &[f64], sigma: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n, self.n);
        for p in &self.pairs {
            let (si, sj) = (sigma[p.i], sigma[p.j]);
            let d2 = si * si + sj * sj;
            let z = (s[p.i] - s[p.j]) / d2.sqrt();
            let (_, g, hz) = pair_terms(self.model, z, p.a, p.b, true);
            let zi = -z * si / d2;
            let zj = -z * sj / d2;
            let zii = z * (-1.0 / d2 + 3.0 * si * si / (d2 * d2));
            let zjj = z * (-1.0 / d2 + 3.0 * sj * sj / (d2 * d2));
            let zij = 3.0 * z * si * sj / (d2 * d2);
            h[(p.i, p.i)] += hz * zi * zi + g * zii;
            h[(p.j, p.j)] += hz * zj * zj + g * zjj;
            let off = hz * zi * zj + g * zij;
            h[(p.i, p.j)] += off;
            h[(p.j, p.i)] += off;
        }
        if self.ridge > 0.0 {
            let n = self.n;
            let t: Vec<f64> = sigma.iter().map(|v| v.ln()).collect();
            let mean = t.iter().sum::<f64>() / n as f64;
            for a in 0..n {
                for b in 0..n {
                    let delta = if a == b { 1.0 } else { 0.0 };
                    h[(a, b)] -= self.ridge * (delta - 1.0 / n as f64) / (sigma[a] * sigma[b]);
                }
                h[(a, a)] += self.ridge * (t[a] - mean) / (sigma[a] * sigma[a]);
            }
        }
        h
    }

    /// Full Hessian of the log likelihood in the optimization coordinates
    /// `(s, t)` (Case III) or `s`.
    fn full_hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        if self.model != ModelKind::Case3 {
            let sigma = vec![self.model.fixed_sigma(); n];
            return self.score_hessian(x, &sigma);
        }
        let (s, t) = x.split_at(n);
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        for p in &self.pairs {
            let (d, wi, wj) = self.scale(t, p.i, p.j);
            let z = (s[p.i] - s[p.j]) / d;
            let (_, g, hz) = pair_terms(self.model, z, p.a, p.b, true);
            let (i, j, ti, tj) = (p.i, p.j, n + p.i, n + p.j);
            let idx = [i, j, ti, tj];
            // first derivatives of z in (s_i, s_j, t_i, t_j)
            let dz = [1.0 / d, -1.0 / d, -z * wi, -z * wj];
            // second derivatives of z
            let mut d2z = [[0.0; 4]; 4];
            d2z[0][2] = -wi / d;
            d2z[0][3] = -wj / d;
            d2z[1][2] = wi / d;
            d2z[1][3] = wj / d;
            d2z[2][2] = z * wi * wi - 2.0 * z * wi * wj;
            d2z[3][3] = z * wj * wj - 2.0 * z * wi * wj;
            d2z[2][3] = 3.0 * z * wi * wj;
            for a in 0..4 {
                for b in a..4 {
                    let v = hz * dz[a] * dz[b] + g * d2z[a][b];
                    h[(idx[a], idx[b])] += v;
                    if a != b {
                        h[(idx[b], idx[a])] += v;
                    }
                }
            }
        }
        if self.ridge > 0.0 {
            let c = self.ridge / n as f64;
            for a in 0..n {
                for b in 0..n {
                    h[(n + a, n + b)] += c;
                }
                h[(n + a, n + a)] -= self.ridge;
            }
        }
        h
    }

    /// Curvature of the normalized negative objective with the gauge
    /// directions (score shift; for Case III also the joint scale orbit)
    /// lifted so the Newton system is nonsingular.
    fn newton_matrix(&self, x: &[f64], norm: f64) -> DMatrix<f64> {
        let n = self.n;
        let dim = x.len();
        let mut m = -self.full_hessian(x) * norm;
        let kappa = (0..dim).map(|k| m[(k, k)].abs()).sum::<f64>() / dim as f64;
        let kappa = if kappa > 0.0 && kappa.is_finite() { kappa } else { 1.0 };
        let mut gauge = vec![DVector::from_fn(dim, |k, _| if k < n { 1.0 } else { 0.0 })];
        if self.model == ModelKind::Case3 {
            gauge.push(DVector::from_fn(dim, |k, _| if k < n { x[k] } else { 1.0 }));
        }
        for u in &gauge {
            let u = u.normalize();
            m.ger(kappa, &u, &u, 1.0);
        }
        m
    }

    /// Scores from the standard-normal quantile of each stimulus' win rate;
    /// unit dispersions.
    fn initial_point(&self) -> Vec<f64> {
        let n = self.n;
        let mut wins = vec![0.0; n];
        let mut total = vec![0.0; n];
        for p in &self.pairs {
            wins[p.i] += p.a;
            wins[p.j] += p.b;
            total[p.i] += p.a + p.b;
            total[p.j] += p.a + p.b;
        }
        let mut x: Vec<f64> = wins
            .iter()
            .zip(&total)
            .map(|(w, t)| {
                let rate = if *t > 0.0 { w / t } else { 0.5 };
                normal::quantile(rate.clamp(0.01, 0.99))
            })
            .collect();
        if self.model == ModelKind::Case3 {
            x.extend(std::iter::repeat_n(0.0, n));
        }
        x
    }
}
