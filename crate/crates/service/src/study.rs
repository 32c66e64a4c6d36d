//! Study aggregate: the fusion loop state plus the responses collected for
//! the outstanding batch. Every mutation is an [`Event`], so replaying a log
//! rebuilds the aggregate exactly.

use qboost_core::fusion::{init_state, LoopConfig, StudyState};
use qboost_core::pcm::{AcrRatingTable, PairComparisonMatrix};
use qboost_core::sampler::SampledPair;
use qboost_core::sim::derive_seed;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcrRow {
    pub observer: String,
    pub stimulus: String,
    pub rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Created {
        id: String,
        stimulus_ids: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        acr: Option<Vec<AcrRow>>,
        config: LoopConfig,
    },
    /// One judgment on the outstanding pair `{i, j}` (`i < j`).
    Response {
        annotator: String,
        iteration: usize,
        i: usize,
        j: usize,
        winner: usize,
    },
    Advanced {
        iteration: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingResponse {
    pub annotator: String,
    pub i: usize,
    pub j: usize,
    pub winner: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    First,
    Second,
}

/// A batch pair as shown to observers: `first` is presented on the left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresentedPair {
    pub first: String,
    pub second: String,
    pub i: usize,
    pub j: usize,
    pub eig: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answered: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub id: String,
    pub state: StudyState,
    /// Responses for the outstanding batch, in arrival order.
    pub pending: Vec<PendingResponse>,
    /// Sequence number of the last applied event.
    pub seq: u64,
}

impl Study {
    /// Builds a study from its creation event.
    pub fn create(event: &Event) -> Result<Self> {
        let Event::Created {
            id,
            stimulus_ids,
            acr,
            config,
        } = event
        else {
            return Err(ServiceError::Unprocessable("log must start with a creation event".into()));
        };
        let table = match acr {
            Some(rows) => {
                let mut t = AcrRatingTable::new();
                for r in rows {
                    t.insert(&r.observer, &r.stimulus, r.rating)
                        .map_err(|e| ServiceError::Unprocessable(e.to_string()))?;
                }
                Some(t)
            }
            None => None,
        };
        let state = init_state(table.as_ref(), stimulus_ids, config.clone()).map_err(|e| match e {
            qboost_core::Error::SingularInformation => ServiceError::Numerical(e),
            other => ServiceError::Unprocessable(other.to_string()),
        })?;
        Ok(Self {
            id: id.clone(),
            state,
            pending: Vec::new(),
            seq: 0,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.state.is_complete()
    }

    /// Iteration number of the outstanding batch.
    pub fn batch_iteration(&self) -> usize {
        self.state.iteration + 1
    }

    fn outstanding(&self) -> Result<&[SampledPair]> {
        self.state
            .outstanding
            .as_ref()
            .map(|b| b.pairs.as_slice())
            .ok_or(ServiceError::Exhausted)
    }

    /// Outstanding pairs in EIG order with seeded left/right placement.
    pub fn presented_batch(&self, annotator: Option<&str>) -> Result<Vec<PresentedPair>> {
        let ids = self.state.pcm.ids();
        let iteration = self.batch_iteration();
        let study_seed = id_seed(&self.id) ^ self.state.config.seed;
        Ok(self
            .outstanding()?
            .iter()
            .map(|p| {
                let (lo, hi) = (p.i.min(p.j), p.i.max(p.j));
                let flip = derive_seed(study_seed, iteration as u64, (lo * ids.len() + hi) as u64) & 1 == 1;
                let (first, second) = if flip { (hi, lo) } else { (lo, hi) };
                PresentedPair {
                    first: ids[first].clone(),
                    second: ids[second].clone(),
                    i: p.i,
                    j: p.j,
                    eig: p.eig,
                    answered: annotator.map(|a| self.has_answered(a, lo, hi)),
                }
            })
            .collect())
    }

    fn has_answered(&self, annotator: &str, i: usize, j: usize) -> bool {
        self.pending
            .iter()
            .any(|r| r.annotator == annotator && r.i == i && r.j == j)
    }

    /// Validates a judgment and returns the event recording it.
    pub fn decide_response(&self, annotator: &str, first: &str, second: &str, choice: Choice) -> Result<Event> {
        if annotator.is_empty() {
            return Err(ServiceError::Unprocessable("annotator token required".into()));
        }
        if first == second {
            return Err(ServiceError::Unprocessable("a pair needs two distinct stimuli".into()));
        }
        let pairs = self.outstanding()?;
        let not_outstanding = || ServiceError::Conflict(format!("pair ({first}, {second}) is not outstanding"));
        let a = self.state.pcm.index_of(first).ok_or_else(not_outstanding)?;
        let b = self.state.pcm.index_of(second).ok_or_else(not_outstanding)?;
        let (i, j) = (a.min(b), a.max(b));
        if !pairs.iter().any(|p| p.i.min(p.j) == i && p.i.max(p.j) == j) {
            return Err(not_outstanding());
        }
        if self.has_answered(annotator, i, j) {
            return Err(ServiceError::Conflict(format!(
                "annotator already answered ({first}, {second}) in iteration {}",
                self.batch_iteration()
            )));
        }
        let winner = match choice {
            Choice::First => a,
            Choice::Second => b,
        };
        Ok(Event::Response {
            annotator: annotator.to_string(),
            iteration: self.batch_iteration(),
            i,
            j,
            winner,
        })
    }

    pub fn decide_advance(&self) -> Result<Event> {
        self.outstanding()?;
        Ok(Event::Advanced {
            iteration: self.batch_iteration(),
        })
    }

    /// Applies an event produced by a `decide_*` call or read from the log.
    pub fn apply(&mut self, seq: u64, event: &Event) -> Result<()> {
        match event {
            Event::Created { .. } => {
                return Err(ServiceError::Unprocessable("study already created".into()));
            }
            Event::Response {
                annotator,
                iteration,
                i,
                j,
                winner,
            } => {
                self.check_iteration(*iteration)?;
                self.pending.push(PendingResponse {
                    annotator: annotator.clone(),
                    i: *i,
                    j: *j,
                    winner: *winner,
                });
            }
            Event::Advanced { iteration } => {
                self.check_iteration(*iteration)?;
                let responses = self.pending_matrix()?;
                self.state.advance(&responses).map_err(|e| match e {
                    qboost_core::Error::BudgetExhausted => ServiceError::Exhausted,
                    other => ServiceError::Numerical(other),
                })?;
                self.pending.clear();
            }
        }
        self.seq = seq;
        Ok(())
    }

    fn check_iteration(&self, iteration: usize) -> Result<()> {
        if iteration != self.batch_iteration() {
            return Err(ServiceError::Conflict(format!(
                "event for iteration {iteration} while iteration {} is open",
                self.batch_iteration()
            )));
        }
        Ok(())
    }

    /// Collected responses as a count matrix.
    pub fn pending_matrix(&self) -> Result<PairComparisonMatrix> {
        let mut m = PairComparisonMatrix::zeros(self.state.pcm.ids().to_vec());
        for r in &self.pending {
            let loser = if r.winner == r.i { r.j } else { r.i };
            m.add(r.winner, loser, 1.0).map_err(ServiceError::Numerical)?;
        }
        Ok(m)
    }

    /// Hex SHA-256 over the canonical JSON of the loop state and the
    /// collected responses.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(&(&self.state, &self.pending)).expect("study serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn id_seed(id: &str) -> u64 {
    let h = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}
