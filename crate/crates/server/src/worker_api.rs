//! Endpoints used by workers running in other processes. They authenticate
//! with the shared `worker_token`; without one configured every call is
//! refused.

use std::time::Duration;

use axum::body::Body;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use sae_core::model::{CheckerKind, Submission, SubmissionStatus, TaskSpec};
use sae_core::scheduler::{EvaluationJob, JobResult, SchedulerError, WorkerRecord};
use sae_core::store::BlobRef;
use sae_core::worker::publish_phase;
use serde::{Deserialize, Serialize};

use crate::api::{blocking, ApiError, ApiResult, AppState};

/// Longest time a claim request waits for work before answering 204.
pub const CLAIM_WAIT: Duration = Duration::from_secs(1);

pub fn router(platform: AppState) -> Router<AppState> {
    Router::new()
        .route("/api/worker/register", post(register))
        .route("/api/worker/heartbeat", post(heartbeat))
        .route("/api/worker/claim", post(claim))
        .route("/api/worker/jobs/:id/inputs", post(inputs))
        .route("/api/worker/jobs/:id/status", post(status))
        .route("/api/worker/jobs/:id/complete", post(complete))
        .route("/api/worker/blobs/:hash/:size", get(blob))
        .route_layer(middleware::from_fn_with_state(platform, require_worker_token))
}

async fn require_worker_token(State(p): State<AppState>, req: Request, next: Next) -> Response {
    let Some(expected) = p.config().worker_token.as_deref() else {
        return ApiError::new(StatusCode::FORBIDDEN, "remote workers are disabled").into_response();
    };
    let given = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or("");
    let same = given.len() == expected.len()
        && given.bytes().zip(expected.bytes()).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0;
    if same {
        next.run(req).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "bad worker token").into_response()
    }
}

pub fn scheduler_error(e: SchedulerError) -> ApiError {
    let status = match e {
        SchedulerError::UnknownWorker(_) | SchedulerError::UnknownJob(_) | SchedulerError::UnknownSubmission(_) => {
            StatusCode::NOT_FOUND
        }
        SchedulerError::NotClaimed { .. } | SchedulerError::WorkerBusy(_) | SchedulerError::NotQueued { .. } => {
            StatusCode::CONFLICT
        }
    };
    ApiError::new(status, e.to_string())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub worker_id: String,
    #[serde(default)]
    pub pool: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WorkerRequest {
    pub worker_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatusRequest {
    pub worker_id: String,
    pub status: SubmissionStatus,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub worker_id: String,
    pub result: JobResult,
}

/// Everything a worker needs to evaluate a job besides blob contents.
#[derive(Debug, Serialize, Deserialize)]
pub struct JobInputs {
    pub task: TaskSpec,
    pub submission: Submission,
    pub blobs: Vec<BlobRef>,
}

/// Blobs the evaluator reads for this task and submission.
pub fn referenced_blobs(task: &TaskSpec, sub: &Submission) -> Vec<BlobRef> {
    let mut out: Vec<BlobRef> = sub.files.values().cloned().collect();
    for case in &task.test_cases {
        out.extend(case.stdin_ref.iter().cloned());
        out.extend(case.expected_ref.iter().cloned());
    }
    if let CheckerKind::Custom { custom_checker_ref } = &task.checker.kind {
        out.push(custom_checker_ref.clone());
    }
    out.sort_by(|a, b| a.hash.cmp(&b.hash));
    out.dedup();
    out
}

fn valid_worker_id(id: &str) -> ApiResult<()> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.@".contains(c));
    if ok {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid worker id {id:?}")))
    }
}

async fn register(State(p): State<AppState>, Json(req): Json<RegisterRequest>) -> ApiResult<Json<WorkerRecord>> {
    valid_worker_id(&req.worker_id)?;
    blocking(move || Ok(Json(p.scheduler().register_worker(&req.worker_id, req.pool)))).await
}

async fn heartbeat(State(p): State<AppState>, Json(req): Json<WorkerRequest>) -> ApiResult<StatusCode> {
    p.scheduler().heartbeat(&req.worker_id).map_err(scheduler_error)?;
    Ok(StatusCode::NO_CONTENT)
}

/// Answers with a job, or 204 after waiting up to [`CLAIM_WAIT`].
async fn claim(State(p): State<AppState>, Json(req): Json<WorkerRequest>) -> ApiResult<Response> {
    blocking(move || {
        let sched = p.scheduler();
        let mut job = sched.claim_next(&req.worker_id).map_err(scheduler_error)?;
        if job.is_none() {
            sched.wait_for_work(CLAIM_WAIT);
            job = sched.claim_next(&req.worker_id).map_err(scheduler_error)?;
        }
        Ok(match job {
            Some(job) => Json(job).into_response(),
            None => StatusCode::NO_CONTENT.into_response(),
        })
    })
    .await
}

fn held_job(p: &AppState, job_id: &str, worker_id: &str) -> ApiResult<EvaluationJob> {
    let job = p.scheduler().job(job_id).ok_or_else(|| ApiError::not_found(format!("job {job_id:?}")))?;
    if job.claimed_by.as_deref() != Some(worker_id) {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("job {job_id:?} is not held by worker {worker_id:?}")));
    }
    Ok(job)
}

async fn inputs(
    State(p): State<AppState>,
    Path(job_id): Path<String>,
    Json(req): Json<WorkerRequest>,
) -> ApiResult<Json<JobInputs>> {
    blocking(move || {
        let job = held_job(&p, &job_id, &req.worker_id)?;
        let submission = p.store().submission(&job.submission_id)?;
        let task = p.store().task(&submission.task_id)?;
        let blobs = referenced_blobs(&task, &submission);
        Ok(Json(JobInputs { task, submission, blobs }))
    })
    .await
}

async fn status(
    State(p): State<AppState>,
    Path(job_id): Path<String>,
    Json(req): Json<StatusRequest>,
) -> ApiResult<StatusCode> {
    blocking(move || {
        publish_phase(p.scheduler(), p.store(), &req.worker_id, &job_id, req.status)
            .map_err(|e| ApiError::new(StatusCode::CONFLICT, e))?;
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}

async fn complete(
    State(p): State<AppState>,
    Path(job_id): Path<String>,
    Json(req): Json<CompleteRequest>,
) -> ApiResult<Json<EvaluationJob>> {
    blocking(move || {
        let job = p.scheduler().complete(&req.worker_id, &job_id, req.result).map_err(scheduler_error)?;
        Ok(Json(job))
    })
    .await
}

async fn blob(State(p): State<AppState>, Path((hash, size)): Path<(String, u64)>) -> ApiResult<Response> {
    if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(ApiError::not_found(format!("blob {hash:?}")));
    }
    blocking(move || {
        let r = BlobRef { hash: hash.to_ascii_lowercase(), size };
        if !p.store().has_blob(&r) {
            return Err(ApiError::not_found(format!("blob {}", r.hash)));
        }
        let data = p.store().get_blob(&r)?;
        let mut resp = Response::new(Body::from(data));
        resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
        Ok(resp)
    })
    .await
}
