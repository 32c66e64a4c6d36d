//! The active fusion loop: ACR-initialized matrix, fit, batch selection,
//! response merge, refit, until the pair budget is spent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcm::{pcm_from_acr_over, pcm_merge, AcrRatingTable, PairComparisonMatrix};
use crate::quadrature::{gauss_hermite_rule, QuadratureRule};
use crate::sampler::{select_batch_with, BatchMode, SamplingBatch};
use crate::scale::{fit, FitOptions, ModelKind, QualityEstimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Pairs issued per iteration.
    pub n_pc: usize,
    /// Number of batches; the pair budget is `n_pc * n_itr`.
    pub n_itr: usize,
    pub fit: FitOptions,
    pub quadrature_order: usize,
    pub use_acr_init: bool,
    /// Multiplier applied to ACR-derived counts before fusion.
    pub acr_weight: f64,
    pub model: ModelKind,
    pub batch_mode: BatchMode,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            n_pc: 1,
            n_itr: 1,
            fit: FitOptions::default(),
            quadrature_order: 21,
            use_acr_init: true,
            acr_weight: 1.0,
            model: ModelKind::Case3,
            batch_mode: BatchMode::SpanningTree,
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn n_budget(&self) -> usize {
        self.n_pc * self.n_itr
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pc == 0 || self.n_itr == 0 {
            return Err(Error::InvalidConfig("n_pc and n_itr must be positive".into()));
        }
        if !(self.acr_weight >= 0.0 && self.acr_weight.is_finite()) {
            return Err(Error::InvalidConfig("acr_weight must be >= 0".into()));
        }
        self.fit.validate()?;
        gauss_hermite_rule(self.quadrature_order).map(|_| ())
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            seed: self.seed ^ self.fit.seed,
            ..self.fit
        }
    }
}

/// Compact per-iteration view of an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub s_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
}

impl From<&QualityEstimate> for EstimateSummary {
    fn from(e: &QualityEstimate) -> Self {
        Self {
            s_hat: e.s_hat.clone(),
            sigma_hat: e.sigma_hat.clone(),
            log_likelihood: e.log_likelihood,
            converged: e.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Number of merged response rounds behind `estimate`.
    pub iteration: usize,
    /// Batch issued after this fit; `None` once the budget is spent.
    pub batch: Option<SamplingBatch>,
    pub pcm_digest: String,
    pub pcm_mass: f64,
    pub estimate: EstimateSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyState {
    pub config: LoopConfig,
    pub pcm: PairComparisonMatrix,
    /// Completed response rounds, `0..=n_itr`.
    pub iteration: usize,
    pub estimate: QualityEstimate,
    pub outstanding: Option<SamplingBatch>,
    pub history: Vec<IterationRecord>,
}

/// Builds the initial matrix, fits it and issues the first batch.
pub fn init_state(
    acr: Option<&AcrRatingTable>,
    stimulus_ids: &[String],
    config: LoopConfig,
) -> Result<StudyState> {
    config.validate()?;
    if stimulus_ids.len() < 2 {
        return Err(Error::TooFewStimuli(stimulus_ids.len()));
    }
    let universe = stimulus_ids.len() * (stimulus_ids.len() - 1) / 2;
    if config.n_pc > universe {
        return Err(Error::BatchTooLarge {
            requested: config.n_pc,
            available: universe,
        });
    }
    let ids = stimulus_ids.to_vec();
    let pcm = match (config.use_acr_init, acr) {
        (true, None) => return Err(Error::AcrRequired),
        (true, Some(table)) => {
            let m = pcm_from_acr_over(table, ids)?;
            if config.acr_weight == 1.0 {
                m
            } else {
                m.scaled(config.acr_weight)
            }
        }
        (false, _) => PairComparisonMatrix::zeros(ids),
    };
    let estimate = fit(config.model, &pcm, &config.fit_options(), None)?;
    let mut state = StudyState {
        config,
        pcm,
        iteration: 0,
        estimate,
        outstanding: None,
        history: Vec::new(),
    };
    state.issue_and_record()?;
    Ok(state)
}

impl StudyState {
    pub fn rule(&self) -> Result<QuadratureRule> {
        gauss_hermite_rule(self.config.quadrature_order)
    }

    pub fn is_complete(&self) -> bool {
        self.outstanding.is_none()
    }

    /// Pairs issued so far.
    pub fn issued_pairs(&self) -> usize {
        self.history
            .iter()
            .filter_map(|r| r.batch.as_ref())
            .map(|b| b.pairs.len())
            .sum()
    }

    /// Rejects responses carrying mass outside the outstanding batch.
    pub fn check_responses(&self, responses: &PairComparisonMatrix) -> Result<()> {
        let batch = self.outstanding.as_ref().ok_or(Error::BudgetExhausted)?;
        if responses.ids() != self.pcm.ids() {
            return Err(Error::IncompatibleMatrices(
                "responses use a different stimulus set".into(),
            ));
        }
        for (i, j) in responses.observed_pairs() {
            if !batch.contains(i, j) {
                return Err(Error::UnsolicitedResponse(
                    self.pcm.ids()[i].clone(),
                    self.pcm.ids()[j].clone(),
                ));
            }
        }
        Ok(())
    }

    /// Merges a round of responses, refits from the previous estimate and
    /// issues the next batch while budget remains.
    pub fn advance(&mut self, responses: &PairComparisonMatrix) -> Result<()> {
        self.check_responses(responses)?;
        let pcm = pcm_merge(&self.pcm, responses)?;
        let estimate = fit(
            self.config.model,
            &pcm,
            &self.config.fit_options(),
            Some(&self.estimate),
        )?;
        self.pcm = pcm;
        self.estimate = estimate;
        self.iteration += 1;
        self.issue_and_record()
    }

    fn issue_and_record(&mut self) -> Result<()> {
        self.outstanding = if self.iteration < self.config.n_itr {
            let rule = self.rule()?;
            let mut batch =
                select_batch_with(&self.estimate, self.config.n_pc, &rule, self.config.batch_mode)?;
            batch.iteration = self.iteration + 1;
            Some(batch)
        } else {
            None
        };
        self.history.push(IterationRecord {
            iteration: self.iteration,
            batch: self.outstanding.clone(),
            pcm_digest: self.pcm.digest(),
            pcm_mass: self.pcm.total_mass(),
            estimate: EstimateSummary::from(&self.estimate),
        });
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON of the state.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("state serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Functional form of [`StudyState::advance`].
pub fn step(state: &StudyState, responses: &PairComparisonMatrix) -> Result<StudyState> {
    let mut next = state.clone();
    next.advance(responses)?;
    Ok(next)
}
