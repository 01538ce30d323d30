//! HTTP surface for the triage loop, versioned under `/v1`.
//!
//! Bodies are JSON. Every run directory under the served root that holds a
//! `run.json` is addressable by its directory name.
//!
//! | method | path | body / query | response |
//! |---|---|---|---|
//! | GET | `/v1/runs` | | `{"runs": [id]}` |
//! | GET | `/v1/runs/{id}/candidates` | `method`, `offset`, `limit`, `simulation` | [`CandidatePage`] |
//! | GET | `/v1/runs/{id}/decisions` | | `{"decisions": [DecisionRecord]}` |
//! | POST | `/v1/runs/{id}/decisions` | [`DecisionBatch`] | 201, `{"decisions": [DecisionRecord]}` |
//! | POST | `/v1/runs/{id}/retrain` | | 202, [`RetrainStatus`] |
//! | GET | `/v1/runs/{id}/retrain` | | [`RetrainStatus`] |
//! | GET | `/v1/runs/{id}/report` | | [`ReportView`] |
//!
//! Errors are `{"error": message}` with 404 (unknown run, method or
//! artifact), 409 (retrain already running) or 422 (malformed decision).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use veilscan_core::decisions::{self, now_millis, DecisionRecord};
use veilscan_core::surfacing::Provenance;
use veilscan_core::{Cohort, Corpus, Error, EvalReport, ExampleId, Label, Method, Run};

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 1000;
/// Probe links listed per candidate.
pub const PROBE_LINKS: usize = 3;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::MissingArtifact { .. } => StatusCode::NOT_FOUND,
            Error::InvalidInput(_) | Error::UnknownMethod(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLink {
    pub prb_id: ExampleId,
    /// 1-based rank of the candidate under this probe.
    pub rank: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub trn_id: ExampleId,
    pub average_rank: f64,
    /// Mean influence score over the run's probes.
    pub score: f64,
    pub current_label: Label,
    /// The probes under which this candidate ranks highest.
    pub probe_links: Vec<ProbeLink>,
    /// Ground-truth cohort, only in simulation mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohort: Option<Cohort>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePage {
    pub run_id: String,
    pub method: Method,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub candidates: Vec<CandidateView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionInput {
    pub trn_id: ExampleId,
    pub new_label: Label,
    #[serde(default = "human")]
    pub decided_by: Provenance,
}

fn human() -> Provenance {
    Provenance::Human
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionBatch {
    pub decisions: Vec<DecisionInput>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RetrainStatus {
    #[default]
    Idle,
    Running { started_unix_ms: u64, decisions: usize },
    Succeeded { finished_unix_ms: u64, decisions: usize, report: EvalReport },
    Failed { finished_unix_ms: u64, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportView {
    /// `original` until a decision retrain has completed, then `retrain`.
    pub source: String,
    pub report: EvalReport,
    pub original: EvalReport,
}

#[derive(Debug, Deserialize)]
pub struct CandidateQuery {
    pub method: Option<String>,
    pub offset: Option<usize>,
    pub limit: Option<usize>,
    #[serde(default)]
    pub simulation: bool,
}

/// Label-independent part of a candidate, cached per (run, method).
#[derive(Debug, Clone)]
struct CandidateBase {
    trn_id: ExampleId,
    average_rank: f64,
    score: f64,
    probe_links: Vec<ProbeLink>,
    cohort: Cohort,
}

#[derive(Default)]
struct RunSlot {
    /// Serializes decision appends for the run.
    append: tokio::sync::Mutex<()>,
    retrain: Mutex<RetrainStatus>,
    corpus: Mutex<Option<Arc<Corpus>>>,
    candidates: Mutex<HashMap<Method, Arc<Vec<CandidateBase>>>>,
}

pub struct AppState {
    root: PathBuf,
    slots: Mutex<HashMap<String, Arc<RunSlot>>>,
}

impl AppState {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), slots: Mutex::new(HashMap::new()) }
    }

    fn run_dir(&self, id: &str) -> ApiResult<PathBuf> {
        let simple = !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\']);
        let dir = self.root.join(id);
        if simple && dir.join(veilscan_core::pipeline::RUN_FILE).is_file() {
            Ok(dir)
        } else {
            Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown run {id:?}")))
        }
    }

    fn slot(&self, id: &str) -> Arc<RunSlot> {
        self.slots.lock().unwrap().entry(id.to_string()).or_default().clone()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/runs", get(list_runs))
        .route("/v1/runs/{id}/candidates", get(candidates))
        .route("/v1/runs/{id}/decisions", get(list_decisions).post(post_decisions))
        .route("/v1/runs/{id}/retrain", get(retrain_status).post(start_retrain))
        .route("/v1/runs/{id}/report", get(report))
        .with_state(state)
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker panicked: {e}")))?
}

async fn open_run(state: &AppState, id: &str) -> ApiResult<Run> {
    let dir = state.run_dir(id)?;
    blocking(move || Run::open(&dir).map_err(ApiError::from)).await
}

fn corpus_of(slot: &RunSlot, run: &Run) -> ApiResult<Arc<Corpus>> {
    if let Some(c) = slot.corpus.lock().unwrap().as_ref() {
        return Ok(c.clone());
    }
    let c = Arc::new(run.load_corpus()?);
    *slot.corpus.lock().unwrap() = Some(c.clone());
    Ok(c)
}

fn list_run_ids(root: &Path) -> Vec<String> {
    let mut ids: Vec<String> = std::fs::read_dir(root)
        .into_iter()
        .flatten()
        .flatten()
        .filter(|e| e.path().join(veilscan_core::pipeline::RUN_FILE).is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    ids
}

async fn list_runs(State(state): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let root = state.root.clone();
    let ids = blocking(move || Ok(list_run_ids(&root))).await?;
    Ok(Json(serde_json::json!({ "runs": ids })))
}

fn default_method(run: &Run) -> ApiResult<Method> {
    let methods = run.config().parsed_methods()?;
    methods
        .iter()
        .copied()
        .find(|&m| m == Method::TrackIn)
        .or_else(|| methods.first().copied())
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "run has no methods"))
}

fn build_candidates(run: &Run, method: Method, corpus: &Corpus) -> ApiResult<Vec<CandidateBase>> {
    let table = run.load_ranks(method)?;
    let scores = run.load_scores(method)?;
    let mut sums: HashMap<ExampleId, (f64, usize)> = HashMap::new();
    let mut by_pair: HashMap<(ExampleId, ExampleId), f64> = HashMap::new();
    for s in &scores {
        let e = sums.entry(s.trn_id).or_default();
        e.0 += s.score;
        e.1 += 1;
        if let Some(p) = s.prb_id {
            by_pair.insert((s.trn_id, p), s.score);
        }
    }
    let mut links: HashMap<ExampleId, Vec<ProbeLink>> = HashMap::new();
    for (prb, order) in &table.per_probe_ranks {
        let Some(prb) = *prb else { continue };
        for (pos, &id) in order.iter().enumerate() {
            let score = by_pair.get(&(id, prb)).copied().unwrap_or(f64::NAN);
            links.entry(id).or_default().push(ProbeLink { prb_id: prb, rank: pos + 1, score });
        }
    }
    table
        .sorted_by_average
        .iter()
        .map(|&id| {
            let (sum, n) = sums.get(&id).copied().unwrap_or_default();
            let mut l = links.remove(&id).unwrap_or_default();
            l.sort_by_key(|x| (x.rank, x.prb_id));
            l.truncate(PROBE_LINKS);
            let cohort = corpus
                .train_example(id)
                .map(|e| e.cohort)
                .ok_or_else(|| ApiError::from(Error::InvalidInput(format!("ranked id {id} missing from corpus"))))?;
            Ok(CandidateBase {
                trn_id: id,
                average_rank: table.average_rank[&id],
                score: if n == 0 { 0.0 } else { sum / n as f64 },
                probe_links: l,
                cohort,
            })
        })
        .collect()
}

async fn candidates(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<CandidateQuery>,
) -> ApiResult<Json<CandidatePage>> {
    let run = open_run(&state, &id).await?;
    let slot = state.slot(&id);
    let method = match &q.method {
        Some(m) => m.parse::<Method>()?,
        None => default_method(&run)?,
    };
    if !run.config().parsed_methods()?.contains(&method) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("run {id:?} has no {method} ranking")));
    }
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
    let run_id = id.clone();
    blocking(move || {
        let corpus = corpus_of(&slot, &run)?;
        let cached = slot.candidates.lock().unwrap().get(&method).cloned();
        let base = match cached {
            Some(b) => b,
            None => {
                let b = Arc::new(build_candidates(&run, method, &corpus)?);
                slot.candidates.lock().unwrap().insert(method, b.clone());
                b
            }
        };
        let labels = run.current_labels(&corpus)?;
        let page = base
            .iter()
            .skip(offset)
            .take(limit)
            .map(|c| CandidateView {
                trn_id: c.trn_id,
                average_rank: c.average_rank,
                score: c.score,
                current_label: labels[&c.trn_id],
                probe_links: c.probe_links.clone(),
                cohort: q.simulation.then_some(c.cohort),
            })
            .collect();
        Ok(Json(CandidatePage { run_id, method, total: base.len(), offset, limit, candidates: page }))
    })
    .await
}

async fn list_decisions(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let run = open_run(&state, &id).await?;
    let log = blocking(move || run.read_decisions().map_err(ApiError::from)).await?;
    Ok(Json(serde_json::json!({ "decisions": log })))
}

async fn post_decisions(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let run = open_run(&state, &id).await?;
    let batch: DecisionBatch =
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("malformed decision batch: {e}")))?;
    if batch.decisions.is_empty() {
        return Err(ApiError::unprocessable("decision batch is empty"));
    }
    let slot = state.slot(&id);
    let _guard = slot.append.lock().await;
    let run_id = id.clone();
    let slot2 = slot.clone();
    let records = blocking(move || {
        let corpus = corpus_of(&slot2, &run)?;
        let candidates: HashSet<ExampleId> = corpus.candidates().iter().map(|e| e.id).collect();
        if let Some(bad) = batch.decisions.iter().find(|d| !candidates.contains(&d.trn_id)) {
            return Err(ApiError::unprocessable(format!("example {} is not a candidate of run {run_id:?}", bad.trn_id)));
        }
        let mut labels: BTreeMap<ExampleId, Label> = run.current_labels(&corpus)?;
        let now = now_millis();
        let records: Vec<DecisionRecord> = batch
            .decisions
            .iter()
            .map(|d| {
                let prior = labels.insert(d.trn_id, d.new_label).unwrap_or(d.new_label);
                DecisionRecord {
                    run_id: run_id.clone(),
                    trn_id: d.trn_id,
                    prior_label: prior,
                    new_label: d.new_label,
                    decided_by: d.decided_by,
                    timestamp: now,
                }
            })
            .collect();
        decisions::append_log(&run.decision_log_path(), &records)?;
        Ok(records)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "decisions": records }))))
}

async fn retrain_status(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<RetrainStatus>> {
    state.run_dir(&id)?;
    Ok(Json(state.slot(&id).retrain.lock().unwrap().clone()))
}

async fn start_retrain(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<(StatusCode, Json<RetrainStatus>)> {
    let run = open_run(&state, &id).await?;
    let slot = state.slot(&id);
    let count = {
        let r = run.clone();
        blocking(move || Ok(decisions::replay(&r.read_decisions()?).len())).await?
    };
    let status = {
        let mut st = slot.retrain.lock().unwrap();
        if matches!(*st, RetrainStatus::Running { .. }) {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("a retrain of run {id:?} is already running")));
        }
        *st = RetrainStatus::Running { started_unix_ms: now_millis(), decisions: count };
        st.clone()
    };
    tokio::spawn(async move {
        let result = tokio::task::spawn_blocking(move || run.retrain_from_decisions()).await;
        let finished_unix_ms = now_millis();
        let next = match result {
            Ok(Ok(report)) => RetrainStatus::Succeeded { finished_unix_ms, decisions: count, report },
            Ok(Err(e)) => RetrainStatus::Failed { finished_unix_ms, error: e.to_string() },
            Err(e) => RetrainStatus::Failed { finished_unix_ms, error: format!("worker panicked: {e}") },
        };
        *slot.retrain.lock().unwrap() = next;
    });
    Ok((StatusCode::ACCEPTED, Json(status)))
}

async fn report(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<ReportView>> {
    let run = open_run(&state, &id).await?;
    blocking(move || {
        let original = run.distill_summary()?.original;
        let view = match run.human_report()? {
            Some(report) => ReportView { source: "retrain".into(), report, original },
            None => ReportView { source: "original".into(), report: original.clone(), original },
        };
        Ok(Json(view))
    })
    .await
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(root: PathBuf, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving {} on http://{}", root.display(), listener.local_addr()?);
    axum::serve(listener, router(Arc::new(AppState::new(root)))).await
}
