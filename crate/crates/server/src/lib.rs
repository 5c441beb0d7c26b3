//! The evaluation service: an HTTP/JSON facade over the pipeline.
//!
//! Endpoints (all under `/api/v1`):
//!
//! | Route            | Method | Behavior                                   |
//! |------------------|--------|--------------------------------------------|
//! | `/health`        | GET    | Liveness and version                       |
//! | `/synth-check`   | POST   | Run the synthetic-oracle suite, inline     |
//! | `/filter`        | POST   | Submit a retrieval-filter job              |
//! | `/sweep`         | POST   | Submit an evaluation-sweep job             |
//! | `/fit-recal`     | POST   | Submit a recalibration-fitting job         |
//! | `/report`        | POST   | Emit tables and figures from stored runs   |
//! | `/jobs/{id}`     | GET    | Poll a job                                 |
//!
//! Evaluation runs take minutes to hours against real endpoints, so the
//! heavy routes return a job id immediately and clients poll. Request and
//! response types live in `obeval_client::api`.

#![forbid(unsafe_code)]

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};

use obeval_client::api::{
    FilterRequest, FitRecalRequest, HealthResponse, JobSubmitted, ReportRequest, SweepRequest,
    SynthCheckResponse,
};

mod jobs;
mod ops;

pub use jobs::JobStore;

#[derive(Clone, Default)]
pub struct AppState {
    jobs: JobStore,
}

pub fn router() -> Router {
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/synth-check", post(synth_check))
        .route("/api/v1/filter", post(submit_filter))
        .route("/api/v1/sweep", post(submit_sweep))
        .route("/api/v1/fit-recal", post(submit_fit_recal))
        .route("/api/v1/report", post(run_report))
        .route("/api/v1/jobs/{id}", get(job_status))
        .with_state(AppState::default())
}

/// Serve until the listener closes.
pub async fn serve(listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

/// Bind an ephemeral local port and serve in the background; returns the
/// base URL. Used by the CLI when no external service is configured.
pub async fn spawn_ephemeral() -> std::io::Result<String> {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    tokio::spawn(async move {
        let _ = serve(listener).await;
    });
    Ok(format!("http://{addr}"))
}

async fn health() -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

async fn synth_check() -> Json<SynthCheckResponse> {
    let checks = obeval_pipeline::synthcheck::run_all().await;
    let passed = obeval_pipeline::synthcheck::all_passed(&checks);
    Json(SynthCheckResponse { passed, checks })
}

async fn submit_filter(
    State(state): State<AppState>,
    Json(request): Json<FilterRequest>,
) -> Json<JobSubmitted> {
    let job_id = state
        .jobs
        .submit("filter", async move {
            ops::filter(request).await
        })
        .await;
    Json(JobSubmitted { job_id })
}

async fn submit_sweep(
    State(state): State<AppState>,
    Json(request): Json<SweepRequest>,
) -> Json<JobSubmitted> {
    let job_id = state
        .jobs
        .submit("sweep", async move { ops::sweep(request).await })
        .await;
    Json(JobSubmitted { job_id })
}

async fn submit_fit_recal(
    State(state): State<AppState>,
    Json(request): Json<FitRecalRequest>,
) -> Json<JobSubmitted> {
    let job_id = state
        .jobs
        .submit("fit-recal", async move { ops::fit_recal(request).await })
        .await;
    Json(JobSubmitted { job_id })
}

async fn run_report(Json(request): Json<ReportRequest>) -> Response {
    match ops::report(&request) {
        Ok(summary) => Json(summary).into_response(),
        Err(e) => {
            let status = if e.is_config() {
                StatusCode::BAD_REQUEST
            } else {
                StatusCode::INTERNAL_SERVER_ERROR
            };
            (status, e.to_string()).into_response()
        }
    }
}

async fn job_status(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match state.jobs.get(&id).await {
        Some(status) => Json(status).into_response(),
        None => (StatusCode::NOT_FOUND, format!("no job `{id}`")).into_response(),
    }
}
