//! Worker loop: claim a job, evaluate it, report back, repeat.
//!
//! The loop talks to the scheduler through a [`WorkerLink`], so the same
//! code runs in-process ([`LocalLink`]) and as a separate process that
//! reaches the service over HTTP.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tracing::{debug, info, warn};

use crate::evaluator::{evaluate, EvaluationPlan, InfraFailure};
use crate::model::SubmissionStatus;
use crate::sandbox::SandboxBackend;
use crate::scheduler::{EvaluationJob, JobResult, Scheduler};
use crate::store::Store;

pub trait WorkerLink: Send + Sync {
    fn register(&self, worker_id: &str, pool: Option<&str>) -> Result<(), String>;
    fn heartbeat(&self, worker_id: &str) -> Result<(), String>;
    fn claim(&self, worker_id: &str) -> Result<Option<EvaluationJob>, String>;
    /// Publishes the `compiling`/`running` phase of a claimed job.
    fn publish(&self, worker_id: &str, job: &EvaluationJob, status: SubmissionStatus) -> Result<(), String>;
    fn complete(&self, worker_id: &str, job: &EvaluationJob, result: JobResult) -> Result<(), String>;
    /// Makes the job's task, submission and blobs available in the worker's
    /// store. Links that share the service's store have nothing to do.
    fn prepare(&self, _worker_id: &str, _job: &EvaluationJob) -> Result<(), String> {
        Ok(())
    }
    /// Blocks until work may be available or `timeout` passes.
    fn wait(&self, timeout: Duration) {
        thread::sleep(timeout);
    }
}

/// Direct access to an in-process scheduler and store.
pub struct LocalLink {
    pub scheduler: Arc<Scheduler>,
    pub store: Arc<Store>,
}

impl WorkerLink for LocalLink {
    fn register(&self, worker_id: &str, pool: Option<&str>) -> Result<(), String> {
        self.scheduler.register_worker(worker_id, pool.map(str::to_string));
        Ok(())
    }

    fn heartbeat(&self, worker_id: &str) -> Result<(), String> {
        self.scheduler.heartbeat(worker_id).map_err(|e| e.to_string())
    }

    fn claim(&self, worker_id: &str) -> Result<Option<EvaluationJob>, String> {
        self.scheduler.claim_next(worker_id).map_err(|e| e.to_string())
    }

    fn publish(&self, worker_id: &str, job: &EvaluationJob, status: SubmissionStatus) -> Result<(), String> {
        publish_phase(&self.scheduler, &self.store, worker_id, &job.job_id, status)
    }

    fn complete(&self, worker_id: &str, job: &EvaluationJob, result: JobResult) -> Result<(), String> {
        self.scheduler.complete(worker_id, &job.job_id, result).map(|_| ()).map_err(|e| e.to_string())
    }

    fn wait(&self, timeout: Duration) {
        self.scheduler.wait_for_work(timeout);
    }
}

/// Advances a submission's status on behalf of the worker holding its job.
/// Workers that no longer hold the job are refused.
pub fn publish_phase(
    scheduler: &Scheduler,
    store: &Store,
    worker_id: &str,
    job_id: &str,
    status: SubmissionStatus,
) -> Result<(), String> {
    let job = scheduler.job(job_id).ok_or_else(|| format!("unknown job {job_id:?}"))?;
    if job.claimed_by.as_deref() != Some(worker_id) {
        return Err(format!("job {job_id:?} is not held by worker {worker_id:?}"));
    }
    if status.is_terminal() {
        return Err("terminal statuses are set by completing the job".into());
    }
    store.advance_submission(&job.submission_id, status).map(|_| ()).map_err(|e| e.to_string())
}

/// Evaluates one claimed job against the store's records and blobs.
pub fn run_job(
    store: &Store,
    backend: &dyn SandboxBackend,
    job: &EvaluationJob,
    publish: &mut dyn FnMut(SubmissionStatus),
) -> JobResult {
    let plan = store
        .submission(&job.submission_id)
        .and_then(|sub| Ok((store.task(&sub.task_id)?, sub)))
        .map_err(|e| InfraFailure::new(format!("cannot load job inputs: {e}")))
        .and_then(|(task, sub)| EvaluationPlan::new(&task, &sub));
    match plan.and_then(|plan| evaluate(&plan, backend, store, publish)) {
        Ok(report) => JobResult::Evaluated { report },
        Err(e) => JobResult::InfraFailure { reason: e.reason },
    }
}

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    pub worker_id: String,
    pub pool: Option<String>,
    pub heartbeat_interval: Duration,
    pub idle_wait: Duration,
}

impl WorkerOptions {
    pub fn new(worker_id: impl Into<String>) -> Self {
        WorkerOptions {
            worker_id: worker_id.into(),
            pool: None,
            heartbeat_interval: Duration::from_secs(5),
            idle_wait: Duration::from_millis(200),
        }
    }
}

/// A running worker thread with its heartbeat thread.
pub struct WorkerHandle {
    pub worker_id: String,
    stop: Arc<AtomicBool>,
    killed: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl WorkerHandle {
    /// Finishes the current job, then exits.
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.join();
    }

    /// Simulates a crash: heartbeats stop immediately and any job in
    /// progress is abandoned without being reported.
    pub fn kill(mut self) {
        self.killed.store(true, Ordering::SeqCst);
        self.stop.store(true, Ordering::SeqCst);
        self.join();
    }

    fn join(&mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.join();
    }
}

pub fn spawn_worker(
    link: Arc<dyn WorkerLink>,
    store: Arc<Store>,
    backend: Arc<dyn SandboxBackend>,
    opts: WorkerOptions,
) -> Result<WorkerHandle, String> {
    link.register(&opts.worker_id, opts.pool.as_deref())?;
    let stop = Arc::new(AtomicBool::new(false));
    let killed = Arc::new(AtomicBool::new(false));

    let beat = {
        let (link, stop, id, every) = (link.clone(), stop.clone(), opts.worker_id.clone(), opts.heartbeat_interval);
        thread::Builder::new()
            .name(format!("{id}-heartbeat"))
            .spawn(move || {
                let mut last = Instant::now();
                while !stop.load(Ordering::SeqCst) {
                    thread::sleep(Duration::from_millis(20).min(every));
                    if last.elapsed() >= every {
                        if let Err(e) = link.heartbeat(&id) {
                            warn!(worker_id = %id, error = %e, "heartbeat failed");
                        }
                        last = Instant::now();
                    }
                }
            })
            .map_err(|e| e.to_string())?
    };

    let worker_id = opts.worker_id.clone();
    let main = {
        let (stop, killed) = (stop.clone(), killed.clone());
        thread::Builder::new()
            .name(worker_id.clone())
            .spawn(move || worker_loop(&*link, &store, &*backend, &opts, &stop, &killed))
            .map_err(|e| e.to_string())?
    };

    info!(worker_id = %worker_id, "worker started");
    Ok(WorkerHandle { worker_id, stop, killed, threads: vec![main, beat] })
}

fn worker_loop(
    link: &dyn WorkerLink,
    store: &Store,
    backend: &dyn SandboxBackend,
    opts: &WorkerOptions,
    stop: &AtomicBool,
    killed: &AtomicBool,
) {
    let id = opts.worker_id.as_str();
    while !stop.load(Ordering::SeqCst) {
        let job = match link.claim(id) {
            Ok(Some(job)) => job,
            Ok(None) => {
                link.wait(opts.idle_wait);
                continue;
            }
            Err(e) => {
                warn!(worker_id = id, error = %e, "claim failed");
                thread::sleep(opts.idle_wait);
                continue;
            }
        };
        debug!(worker_id = id, job_id = %job.job_id, "claimed");
        let prepared = link.prepare(id, &job);
        let result = match prepared {
            Err(reason) => JobResult::InfraFailure { reason: format!("cannot fetch job inputs: {reason}") },
            Ok(()) => run_job(store, backend, &job, &mut |status| {
                if killed.load(Ordering::SeqCst) {
                    return;
                }
                if let Err(e) = link.publish(id, &job, status) {
                    debug!(worker_id = id, job_id = %job.job_id, error = %e, "status not published");
                }
            }),
        };
        if killed.load(Ordering::SeqCst) {
            debug!(worker_id = id, job_id = %job.job_id, "killed; job abandoned");
            return;
        }
        if let Err(e) = link.complete(id, &job, result) {
            warn!(worker_id = id, job_id = %job.job_id, error = %e, "completion refused");
        }
    }
}
