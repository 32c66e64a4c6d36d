//! Monte Carlo evaluation of the active loop against simulated observers.
//!
//! Each repetition draws a ground truth, optionally runs a quantized ACR pass,
//! and then drives one active loop per model. A standard trial is a budget of
//! `n(n-1)/2` labels; batches of `n-1` pairs are issued and answered until the
//! trial's budget is consumed (the last batch of a trial answers only its
//! top-gain pairs when the budget does not divide evenly). After every trial
//! the model's current estimate is scored against the truth with SROCC.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{init_state, LoopConfig};
use crate::metrics::srocc;
use crate::pcm::{AcrRatingTable, PairComparisonMatrix};
use crate::sampler::BatchMode;
use crate::scale::{FitOptions, ModelKind};

/// How an observer's momentary rating of a stimulus is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModel {
    /// `r ~ N(s, σ²)` with the stimulus' own dispersion.
    #[default]
    Gaussian,
    /// `r = s + u`, `u ~ U(0, 0.7)` drawn afresh per rating.
    UniformAdditive,
}

const UNIFORM_NOISE_MAX: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub s_true: Vec<f64>,
    pub sigma_true: Vec<f64>,
    pub seed: u64,
}

impl GroundTruth {
    /// Scores uniform on `[1, 5]`, dispersions uniform on `[0, 0.7]`.
    pub fn draw(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s_true = (0..n).map(|_| rng.random_range(1.0..=5.0)).collect();
        let sigma_true = (0..n).map(|_| rng.random_range(0.0..=0.7)).collect();
        Self {
            s_true,
            sigma_true,
            seed,
        }
    }

    pub fn n(&self) -> usize {
        self.s_true.len()
    }

    pub fn ids(&self) -> Vec<String> {
        stimulus_ids(self.n())
    }

    fn rating<R: Rng>(&self, i: usize, noise: NoiseModel, rng: &mut R) -> f64 {
        match noise {
            NoiseModel::Gaussian => {
                let z: f64 = rng.sample(StandardNormal);
                self.s_true[i] + self.sigma_true[i] * z
            }
            NoiseModel::UniformAdditive => {
                self.s_true[i] + rng.random_range(0.0..UNIFORM_NOISE_MAX)
            }
        }
    }
}

/// Zero-padded ids so lexicographic and numeric order agree.
pub fn stimulus_ids(n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len();
    (0..n).map(|i| format!("s{i:0width$}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    FirstWins,
    SecondWins,
}

/// One simulated judgment of `i` against `j`; exact ties go to a fair coin.
pub fn simulate_comparison<R: Rng>(
    gt: &GroundTruth,
    i: usize,
    j: usize,
    noise: NoiseModel,
    rng: &mut R,
) -> Outcome {
    assert!(i != j && i < gt.n() && j < gt.n(), "invalid pair ({i}, {j})");
    let ri = gt.rating(i, noise, rng);
    let rj = gt.rating(j, noise, rng);
    if ri > rj || (ri == rj && rng.random_bool(0.5)) {
        Outcome::FirstWins
    } else {
        Outcome::SecondWins
    }
}

/// One quantized ACR pass: each observer rates every stimulus, rounded to the
/// nearest category of `1..=levels`.
pub fn simulate_acr<R: Rng>(
    gt: &GroundTruth,
    observers: usize,
    levels: u32,
    noise: NoiseModel,
    rng: &mut R,
) -> AcrRatingTable {
    let ids = gt.ids();
    let mut table = AcrRatingTable::new();
    for o in 0..observers {
        let obs = format!("acr{o:03}");
        for (k, id) in ids.iter().enumerate() {
            let r = gt.rating(k, noise, rng).round().clamp(1.0, levels as f64);
            table.insert(&obs, id, r).expect("fresh observer");
        }
    }
    table
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub reps: usize,
    pub standard_trials: usize,
    pub models: Vec<ModelKind>,
    pub fit: FitOptions,
    pub quadrature_order: usize,
    pub batch_mode: BatchMode,
    pub noise: NoiseModel,
    pub acr_init: bool,
    pub acr_observers: usize,
    pub acr_levels: u32,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 60,
            reps: 100,
            standard_trials: 50,
            models: ModelKind::ALL.to_vec(),
            fit: FitOptions::default(),
            quadrature_order: 21,
            batch_mode: BatchMode::SpanningTree,
            noise: NoiseModel::Gaussian,
            acr_init: false,
            acr_observers: 15,
            acr_levels: 5,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::InvalidConfig("simulation needs n >= 3".into()));
        }
        if self.reps == 0 || self.standard_trials == 0 || self.models.is_empty() {
            return Err(Error::InvalidConfig(
                "reps, trials and models must be non-empty".into(),
            ));
        }
        if self.acr_init && (self.acr_observers == 0 || self.acr_levels < 2) {
            return Err(Error::InvalidConfig("ACR pass needs observers and >= 2 levels".into()));
        }
        self.fit.validate()
    }

    /// Labels per standard trial.
    pub fn trial_budget(&self) -> usize {
        self.n * (self.n - 1) / 2
    }

    /// Batches needed to spend one trial's budget.
    pub fn batches_per_trial(&self) -> usize {
        self.trial_budget().div_ceil(self.n - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialStat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: SimulationConfig,
    /// Per model, one entry per standard trial.
    pub models: BTreeMap<ModelKind, Vec<TrialStat>>,
}

impl SimulationReport {
    pub fn curve(&self, model: ModelKind) -> Option<Vec<f64>> {
        self.models
            .get(&model)
            .map(|v| v.iter().map(|t| t.mean).collect())
    }

    /// `model,trial,mean,std` with 1-based trials.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,trial,mean,std\n");
        for (model, stats) in &self.models {
            for (k, t) in stats.iter().enumerate() {
                out.push_str(&format!("{model},{},{},{}\n", k + 1, t.mean, t.std));
            }
        }
        out
    }
}

/// SROCC after each standard trial for every configured model.
#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionResult {
    pub index: usize,
    pub srocc: BTreeMap<ModelKind, Vec<f64>>,
}

/// Independent seed for a labeled sub-stream of `master`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a mixed input
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRUTH: u64 = 1;
const STREAM_ACR: u64 = 2;
const STREAM_LABELS: u64 = 3;

fn model_index(model: ModelKind) -> u64 {
    match model {
        ModelKind::Case3 => 0,
        ModelKind::Case5 => 1,
        ModelKind::Bt => 2,
    }
}

/// Runs one repetition: every model drives its own loop on a shared truth.
pub fn run_repetition(config: &SimulationConfig, index: usize) -> Result<RepetitionResult> {
    let rep_seed = derive_seed(config.seed, 0, index as u64);
    let gt = GroundTruth::draw(config.n, derive_seed(rep_seed, STREAM_TRUTH, 0));
    let acr = if config.acr_init {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rep_seed, STREAM_ACR, 0));
        Some(simulate_acr(
            &gt,
            config.acr_observers,
            config.acr_levels,
            config.noise,
            &mut rng,
        ))
    } else {
        None
    };
    let mut srocc_by_model = BTreeMap::new();
    for &model in &config.models {
        let curve = run_model_loop(config, &gt, acr.as_ref(), model, rep_seed)?;
        srocc_by_model.insert(model, curve);
    }
    Ok(RepetitionResult {
        index,
        srocc: srocc_by_model,
    })
}

fn run_model_loop(
    config: &SimulationConfig,
    gt: &GroundTruth,
    acr: Option<&AcrRatingTable>,
    model: ModelKind,
    rep_seed: u64,
) -> Result<Vec<f64>> {
    let n = config.n;
    let per_trial = config.batches_per_trial();
    let loop_config = LoopConfig {
        n_pc: n - 1,
        n_itr: per_trial * config.standard_trials,
        fit: config.fit,
        quadrature_order: config.quadrature_order,
        use_acr_init: acr.is_some(),
        acr_weight: 1.0,
        model,
        batch_mode: config.batch_mode,
        seed: rep_seed,
    };
    let ids = gt.ids();
    let mut state = init_state(acr, &ids, loop_config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rep_seed, STREAM_LABELS, model_index(model)));
    let budget = config.trial_budget();
    let mut curve = Vec::with_capacity(config.standard_trials);
    for _ in 0..config.standard_trials {
        let mut remaining = budget;
        while remaining > 0 {
            let batch = state.outstanding.as_ref().ok_or(Error::BudgetExhausted)?;
            let mut responses = PairComparisonMatrix::zeros(ids.clone());
            for p in batch.pairs.iter().take(remaining) {
                match simulate_comparison(gt, p.i, p.j, config.noise, &mut rng) {
                    Outcome::FirstWins => responses.add(p.i, p.j, 1.0)?,
                    Outcome::SecondWins => responses.add(p.j, p.i, 1.0)?,
                }
            }
            remaining -= batch.pairs.len().min(remaining);
            state.advance(&responses)?;
        }
        curve.push(srocc(&state.estimate.s_hat, &gt.s_true).unwrap_or(0.0));
    }
    Ok(curve)
}

/// Mean and sample standard deviation, summed in sorted order so the result
/// does not depend on the order repetitions finished in.
fn aggregate(values: &mut [f64]) -> TrialStat {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        let mut dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
        dev.sort_by(f64::total_cmp);
        (dev.iter().sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    TrialStat { mean, std }
}

/// Folds repetition results into per-trial statistics.
pub fn aggregate_repetitions(
    config: &SimulationConfig,
    results: &[RepetitionResult],
) -> SimulationReport {
    let mut models = BTreeMap::new();
    for &model in &config.models {
        let stats = (0..config.standard_trials)
            .map(|t| {
                let mut vals: Vec<f64> = results.iter().map(|r| r.srocc[&model][t]).collect();
                aggregate(&mut vals)
            })
            .collect();
        models.insert(model, stats);
    }
    SimulationReport {
        config: config.clone(),
        models,
    }
}

/// Runs every repetition (in parallel on the current rayon pool) and
/// aggregates the SROCC curves.
pub fn run_simulation(config: &SimulationConfig) -> Result<SimulationReport> {
    config.validate()?;
    let results: Vec<RepetitionResult> = (0..config.reps)
        .into_par_iter()
        .map(|r| run_repetition(config, r))
        .collect::<Result<_>>()?;
    Ok(aggregate_repetitions(config, &results))
}
