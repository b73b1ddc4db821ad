//! HTTP service over the pipeline.
//!
//! Routes (all JSON, under `/v1`):
//!
//! | method | path           | body / result                                        |
//! |--------|----------------|------------------------------------------------------|
//! | GET    | `/healthz`     | `{status, schema_version}`                           |
//! | POST   | `/ingest`      | `{source}` or an inline stream document; 202 `{job_id}` |
//! | GET    | `/jobs/{id}`   | job status with the report once finished             |
//! | POST   | `/query`       | `{query, overrides: {depth, k}}` → `{answer, score, audit_id}` |
//! | GET    | `/graph/stats` | counts of the current snapshot                       |
//!
//! Failures return `{code, message, exit_code}` where `exit_code` is what the
//! CLI would have exited with for the same failure.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use vidkg::engine::{Engine, EngineError, ErrorCode, GraphStats, IngestReport, QueryOutcome, QueryOverrides};
use vidkg::index_store::SCHEMA_VERSION;
use vidkg::ingestion::{parse_source, read_source};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub exit_code: i32,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    fn not_found(message: String) -> Self {
        Self { code: "NOT_FOUND".into(), message, exit_code: 1, status: 404 }
    }

    fn bad_request(message: String) -> Self {
        let code = ErrorCode::InvalidRequest;
        Self { code: code.as_str().into(), message, exit_code: code.exit_code(), status: 400 }
    }
}

pub fn http_status(code: ErrorCode) -> u16 {
    match code {
        ErrorCode::InvalidRequest => 400,
        ErrorCode::MissingSource => 404,
        ErrorCode::EmptyGraph => 409,
        ErrorCode::GatewayExhausted => 502,
        ErrorCode::InvalidConfig | ErrorCode::StoreError | ErrorCode::Internal => 500,
    }
}

impl From<&EngineError> for ApiError {
    fn from(e: &EngineError) -> Self {
        let code = e.code();
        Self { code: code.as_str().into(), message: e.to_string(), exit_code: code.exit_code(), status: http_status(code) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded { report: Box<IngestReport> },
    Failed { error: ApiError },
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub job_id: String,
    #[serde(flatten)]
    pub state: JobState,
}

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    jobs: Arc<Mutex<BTreeMap<String, Job>>>,
    next_job: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Self {
        Self { engine, jobs: Arc::default(), next_job: Arc::new(AtomicU64::new(1)) }
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    fn set_job(&self, id: &str, state: JobState) {
        let mut jobs = self.jobs.lock().unwrap_or_else(|e| e.into_inner());
        jobs.insert(id.to_string(), Job { job_id: id.to_string(), state });
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum IngestBody {
    Source { source: String },
    Inline(serde_json::Value),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryBody {
    pub query: String,
    #[serde(default)]
    pub overrides: QueryOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReply {
    pub answer: String,
    pub score: f64,
    pub audit_id: String,
    pub degraded: bool,
    pub leaves: usize,
}

impl From<&QueryOutcome> for QueryReply {
    fn from(q: &QueryOutcome) -> Self {
        Self { answer: q.answer.clone(), score: q.score, audit_id: q.audit_id.clone(), degraded: q.degraded, leaves: q.leaves }
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "schema_version": SCHEMA_VERSION }))
}

async fn stats(State(state): State<AppState>) -> Json<GraphStats> {
    Json(state.engine.stats())
}

async fn ingest(
    State(state): State<AppState>,
    Json(body): Json<IngestBody>,
) -> Result<(StatusCode, Json<Job>), ApiError> {
    let streams = match body {
        IngestBody::Source { source } => tokio::task::spawn_blocking(move || read_source(&source))
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?,
        IngestBody::Inline(value) => parse_source(&value.to_string()),
    }
    .map_err(|e| ApiError::from(&EngineError::from(e)))?;
    let id = format!("job-{}", state.next_job.fetch_add(1, Ordering::Relaxed));
    state.set_job(&id, JobState::Queued);
    let worker = state.clone();
    let job_id = id.clone();
    tokio::task::spawn_blocking(move || {
        worker.set_job(&job_id, JobState::Running);
        let state = match worker.engine.ingest(&streams) {
            Ok(report) => JobState::Succeeded { report: Box::new(report) },
            Err(e) => {
                log::error!("ingest job {job_id} failed: {e}");
                JobState::Failed { error: ApiError::from(&e) }
            }
        };
        worker.set_job(&job_id, state);
    });
    Ok((StatusCode::ACCEPTED, Json(Job { job_id: id, state: JobState::Queued })))
}

async fn job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Job>, ApiError> {
    let jobs = state.jobs.lock().unwrap_or_else(|e| e.into_inner());
    jobs.get(&id).cloned().map(Json).ok_or_else(|| ApiError::not_found(format!("no job `{id}`")))
}

async fn query(State(state): State<AppState>, Json(body): Json<QueryBody>) -> Result<Json<QueryReply>, ApiError> {
    let engine = state.engine.clone();
    let outcome = tokio::task::spawn_blocking(move || engine.query(&body.query, body.overrides))
        .await
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    match outcome {
        Ok(o) => Ok(Json(QueryReply::from(&o))),
        Err(e) => Err(ApiError::from(&e)),
    }
}

pub fn router(state: AppState) -> Router {
    let v1 = Router::new()
        .route("/healthz", get(healthz))
        .route("/ingest", post(ingest))
        .route("/jobs/{id}", get(job))
        .route("/query", post(query))
        .route("/graph/stats", get(stats));
    Router::new().nest("/v1", v1).with_state(state)
}
