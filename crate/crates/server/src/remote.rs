//! A worker in another process, talking to the service over HTTP.
//!
//! Job inputs are copied into a local cache store before evaluation so the
//! worker never touches the service's data directory.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use sae_core::model::SubmissionStatus;
use sae_core::sandbox::SandboxBackend;
use sae_core::scheduler::{EvaluationJob, JobResult};
use sae_core::store::{BlobRef, RecordKind, Store};
use sae_core::worker::{spawn_worker, WorkerHandle, WorkerLink, WorkerOptions};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::worker_api::{CompleteRequest, JobInputs, RegisterRequest, StatusRequest, WorkerRequest, CLAIM_WAIT};

pub struct HttpLink {
    base: String,
    token: String,
    client: Client,
    cache: Arc<Store>,
}

impl HttpLink {
    pub fn new(base_url: &str, token: &str, cache: Arc<Store>) -> anyhow::Result<Self> {
        let client = Client::builder().timeout(CLAIM_WAIT + Duration::from_secs(30)).build()?;
        Ok(HttpLink { base: base_url.trim_end_matches('/').to_string(), token: token.to_string(), client, cache })
    }

    fn post(&self, path: &str, body: &impl Serialize) -> Result<Response, String> {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .bearer_auth(&self.token)
            .json(body)
            .send()
            .map_err(|e| e.to_string())?;
        checked(resp)
    }

    fn post_json<T: DeserializeOwned>(&self, path: &str, body: &impl Serialize) -> Result<T, String> {
        self.post(path, body)?.json().map_err(|e| e.to_string())
    }

    fn fetch_blob(&self, r: &BlobRef) -> Result<(), String> {
        let resp = self
            .client
            .get(format!("{}/api/worker/blobs/{}/{}", self.base, r.hash, r.size))
            .bearer_auth(&self.token)
            .send()
            .map_err(|e| e.to_string())?;
        let data = checked(resp)?.bytes().map_err(|e| e.to_string())?;
        if &BlobRef::of(&data) != r {
            return Err(format!("blob {} arrived damaged", r.hash));
        }
        self.cache.put_blob(&data).map(|_| ()).map_err(|e| e.to_string())
    }
}

fn checked(resp: Response) -> Result<Response, String> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let body = resp.text().unwrap_or_default();
    Err(format!("{status}: {}", body.trim()))
}

impl WorkerLink for HttpLink {
    fn register(&self, worker_id: &str, pool: Option<&str>) -> Result<(), String> {
        let req = RegisterRequest { worker_id: worker_id.into(), pool: pool.map(str::to_string) };
        self.post("/api/worker/register", &req).map(|_| ())
    }

    fn heartbeat(&self, worker_id: &str) -> Result<(), String> {
        self.post("/api/worker/heartbeat", &WorkerRequest { worker_id: worker_id.into() }).map(|_| ())
    }

    fn claim(&self, worker_id: &str) -> Result<Option<EvaluationJob>, String> {
        let resp = self.post("/api/worker/claim", &WorkerRequest { worker_id: worker_id.into() })?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        resp.json().map(Some).map_err(|e| e.to_string())
    }

    fn publish(&self, worker_id: &str, job: &EvaluationJob, status: SubmissionStatus) -> Result<(), String> {
        let req = StatusRequest { worker_id: worker_id.into(), status };
        self.post(&format!("/api/worker/jobs/{}/status", job.job_id), &req).map(|_| ())
    }

    fn complete(&self, worker_id: &str, job: &EvaluationJob, result: JobResult) -> Result<(), String> {
        let req = CompleteRequest { worker_id: worker_id.into(), result };
        self.post(&format!("/api/worker/jobs/{}/complete", job.job_id), &req).map(|_| ())
    }

    fn prepare(&self, worker_id: &str, job: &EvaluationJob) -> Result<(), String> {
        let inputs: JobInputs = self.post_json(
            &format!("/api/worker/jobs/{}/inputs", job.job_id),
            &WorkerRequest { worker_id: worker_id.into() },
        )?;
        for r in &inputs.blobs {
            if !self.cache.has_blob(r) {
                self.fetch_blob(r)?;
            }
        }
        let store_err = |e: sae_core::store::StoreError| e.to_string();
        self.cache.put_record(RecordKind::Task, &inputs.task.task_id, &inputs.task).map_err(store_err)?;
        self.cache
            .put_record(RecordKind::Submission, &inputs.submission.submission_id, &inputs.submission)
            .map_err(store_err)?;
        Ok(())
    }

    /// Claims already wait on the server side.
    fn wait(&self, timeout: Duration) {
        thread::sleep(timeout.min(Duration::from_millis(50)));
    }
}

/// Registers with the service at `base_url` and starts evaluating.
pub fn spawn_remote_worker(
    base_url: &str,
    token: &str,
    cache: Arc<Store>,
    backend: Arc<dyn SandboxBackend>,
    opts: WorkerOptions,
) -> anyhow::Result<WorkerHandle> {
    let link = Arc::new(HttpLink::new(base_url, token, cache.clone())?);
    spawn_worker(link, cache, backend, opts).map_err(anyhow::Error::msg)
}
