//! HTTP/JSON service exposing the fusion loop to live observers.
//!
//! | Method | Path | Purpose |
//! |---|---|---|
//! | `POST` | `/studies` | create a study from a stimulus list and/or ACR CSV |
//! | `GET` | `/studies/{id}` | status and state digest |
//! | `GET` | `/studies/{id}/batch` | outstanding pairs in presentation order |
//! | `POST` | `/studies/{id}/responses` | one judgment `{pair, choice, annotator}` |
//! | `POST` | `/studies/{id}/advance` | merge responses, refit, issue the next batch |
//! | `GET` | `/studies/{id}/estimate` | latest estimate with score variances |
//! | `GET` | `/studies/{id}/history` | per-iteration records |

pub mod error;
pub mod store;
pub mod study;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use qboost_core::fusion::{IterationRecord, LoopConfig};
use qboost_core::pcm::AcrRatingTable;
use qboost_core::sampler::BatchMode;
use qboost_core::scale::{FitOptions, ModelKind, QualityEstimate};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use error::{Result, ServiceError};
use store::PersistentStudy;
pub use study::{AcrRow, Choice, Event, PresentedPair, Study};

type Shared = Arc<Mutex<PersistentStudy>>;

/// All studies under one persistence directory.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    root: PathBuf,
    studies: RwLock<BTreeMap<String, Shared>>,
}

impl AppState {
    /// Opens `root`, creating it if needed, and replays every study in it.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        let mut studies = BTreeMap::new();
        for entry in std::fs::read_dir(&root)? {
            let entry = entry?;
            if entry.path().join(store::EVENTS_FILE).is_file() {
                let s = PersistentStudy::open(&entry.path())?;
                studies.insert(s.study().id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(Self {
            inner: Arc::new(Inner {
                root,
                studies: RwLock::new(studies),
            }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    pub fn study_ids(&self) -> Vec<String> {
        self.inner.studies.read().expect("registry lock").keys().cloned().collect()
    }

    fn get(&self, id: &str) -> Result<Shared> {
        self.inner
            .studies
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    /// Runs `f` on a copy of the study's current state.
    pub fn read<T>(&self, id: &str, f: impl FnOnce(&Study) -> T) -> Result<T> {
        let shared = self.get(id)?;
        let guard = shared.lock().expect("study lock");
        Ok(f(guard.study()))
    }

    pub fn create(&self, req: CreateStudy) -> Result<StudyStatus> {
        let mut studies = self.inner.studies.write().expect("registry lock");
        let id = match req.id.clone() {
            Some(id) => {
                validate_id(&id)?;
                id
            }
            None => (1..)
                .map(|k| format!("study-{k:04}"))
                .find(|c| !studies.contains_key(c) && !self.inner.root.join(c).exists())
                .expect("unbounded"),
        };
        if studies.contains_key(&id) {
            return Err(ServiceError::Conflict(format!("study {id} already exists")));
        }
        let event = req.into_event(id.clone())?;
        let persisted = PersistentStudy::create(&self.inner.root, event)?;
        let status = StudyStatus::of(persisted.study());
        studies.insert(id, Arc::new(Mutex::new(persisted)));
        Ok(status)
    }

    pub fn respond(&self, id: &str, annotator: &str, req: &ResponseRequest) -> Result<StudyStatus> {
        let shared = self.get(id)?;
        let mut guard = shared.lock().expect("study lock");
        let event = guard
            .study()
            .decide_response(annotator, &req.pair.first, &req.pair.second, req.choice)?;
        guard.commit(event)?;
        Ok(StudyStatus::of(guard.study()))
    }

    pub fn advance(&self, id: &str) -> Result<StudyStatus> {
        let shared = self.get(id)?;
        let mut guard = shared.lock().expect("study lock");
        let event = guard.study().decide_advance()?;
        guard.commit(event)?;
        Ok(StudyStatus::of(guard.study()))
    }
}

fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(ServiceError::Unprocessable(format!("invalid study id {id:?}")))
    }
}

/// Body of `POST /studies`. Loop settings not given take their defaults;
/// the batch size defaults to one spanning tree (`n - 1` pairs).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateStudy {
    pub id: Option<String>,
    pub stimulus_ids: Option<Vec<String>>,
    /// ACR ratings as CSV with header `observer_id,stimulus_id,rating`.
    pub acr_csv: Option<String>,
    pub n_pc: Option<usize>,
    pub n_itr: Option<usize>,
    pub model: Option<ModelKind>,
    pub use_acr_init: Option<bool>,
    pub acr_weight: Option<f64>,
    pub quadrature_order: Option<usize>,
    pub batch_mode: Option<BatchMode>,
    pub fit: Option<FitOptions>,
    pub seed: Option<u64>,
}

impl CreateStudy {
    fn into_event(self, id: String) -> Result<Event> {
        let acr = match &self.acr_csv {
            Some(csv) => Some(
                AcrRatingTable::read_csv(csv.as_bytes()).map_err(|e| ServiceError::Unprocessable(e.to_string()))?,
            ),
            None => None,
        };
        let stimulus_ids = match (self.stimulus_ids, &acr) {
            (Some(ids), _) => ids,
            (None, Some(t)) => t.stimulus_ids(),
            (None, None) => {
                return Err(ServiceError::Unprocessable("stimulus_ids or acr_csv required".into()));
            }
        };
        let n = stimulus_ids.len();
        let defaults = LoopConfig::default();
        let config = LoopConfig {
            n_pc: self.n_pc.unwrap_or(n.saturating_sub(1).max(1)),
            n_itr: self.n_itr.unwrap_or(defaults.n_itr),
            fit: self.fit.unwrap_or(defaults.fit),
            quadrature_order: self.quadrature_order.unwrap_or(defaults.quadrature_order),
            use_acr_init: self.use_acr_init.unwrap_or(acr.is_some()),
            acr_weight: self.acr_weight.unwrap_or(defaults.acr_weight),
            model: self.model.unwrap_or(defaults.model),
            batch_mode: self.batch_mode.unwrap_or(defaults.batch_mode),
            seed: self.seed.unwrap_or(defaults.seed),
        };
        let acr = acr.map(|t| {
            t.observers()
                .flat_map(|(obs, row)| {
                    row.iter().map(move |(stim, &rating)| AcrRow {
                        observer: obs.to_string(),
                        stimulus: stim.clone(),
                        rating,
                    })
                })
                .collect()
        });
        Ok(Event::Created {
            id,
            stimulus_ids,
            acr,
            config,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRef {
    pub first: String,
    pub second: String,
}

/// Body of `POST /studies/{id}/responses`. The annotator may instead come
/// from an `Authorization: Bearer <token>` header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRequest {
    pub pair: PairRef,
    pub choice: Choice,
    #[serde(default)]
    pub annotator: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyStatus {
    pub id: String,
    /// Completed response rounds.
    pub iteration: usize,
    pub n_itr: usize,
    pub n_pc: usize,
    pub complete: bool,
    pub pending_responses: usize,
    pub issued_pairs: usize,
    pub pcm_mass: f64,
    pub digest: String,
}

impl StudyStatus {
    pub fn of(s: &Study) -> Self {
        Self {
            id: s.id.clone(),
            iteration: s.state.iteration,
            n_itr: s.state.config.n_itr,
            n_pc: s.state.config.n_pc,
            complete: s.is_complete(),
            pending_responses: s.pending.len(),
            issued_pairs: s.state.issued_pairs(),
            pcm_mass: s.state.pcm.total_mass(),
            digest: s.digest(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchView {
    pub iteration: usize,
    pub pairs: Vec<PresentedPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateView {
    pub iteration: usize,
    pub estimate: QualityEstimate,
    /// Diagonal of the score covariance.
    pub score_variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryView {
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
}

#[derive(Debug, Deserialize)]
struct BatchQuery {
    annotator: Option<String>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/studies", post(create_study))
        .route("/studies/{id}", get(get_status))
        .route("/studies/{id}/batch", get(get_batch))
        .route("/studies/{id}/responses", post(post_response))
        .route("/studies/{id}/advance", post(post_advance))
        .route("/studies/{id}/estimate", get(get_estimate))
        .route("/studies/{id}/history", get(get_history))
        .with_state(state)
}

/// Serves until the listener fails or the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Parses a JSON body, reporting every malformed body as 422.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Unprocessable(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Storage(format!("worker failed: {e}")))?
}

async fn create_study(State(app): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<StudyStatus>)> {
    let req: CreateStudy = parse_body(&body)?;
    let status = blocking(move || app.create(req)).await?;
    Ok((StatusCode::CREATED, Json(status)))
}

async fn get_status(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<StudyStatus>> {
    app.read(&id, StudyStatus::of).map(Json)
}

async fn get_batch(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<BatchQuery>,
) -> Result<Json<BatchView>> {
    let view = app.read(&id, |s| {
        s.presented_batch(q.annotator.as_deref()).map(|pairs| BatchView {
            iteration: s.batch_iteration(),
            pairs,
        })
    })??;
    Ok(Json(view))
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    headers
        .get(axum::http::header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(|t| t.trim().to_string())
}

async fn post_response(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<(StatusCode, Json<StudyStatus>)> {
    let req: ResponseRequest = parse_body(&body)?;
    let annotator = req
        .annotator
        .clone()
        .or_else(|| bearer(&headers))
        .ok_or_else(|| ServiceError::Unprocessable("annotator token required".into()))?;
    let status = blocking(move || app.respond(&id, &annotator, &req)).await?;
    Ok((StatusCode::CREATED, Json(status)))
}

async fn post_advance(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<StudyStatus>> {
    blocking(move || app.advance(&id)).await.map(Json)
}

async fn get_estimate(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<EstimateView>> {
    app.read(&id, |s| {
        let n = s.state.estimate.n();
        EstimateView {
            iteration: s.state.iteration,
            estimate: s.state.estimate.clone(),
            score_variance: (0..n).map(|k| s.state.estimate.cov(k, k)).collect(),
        }
    })
    .map(Json)
}

async fn get_history(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<HistoryView>> {
    app.read(&id, |s| HistoryView {
        iteration: s.state.iteration,
        history: s.state.history.clone(),
    })
    .map(Json)
}
