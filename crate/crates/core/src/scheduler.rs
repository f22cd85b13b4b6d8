//! FIFO job queue with pull-based workers.
//!
//! Workers claim the oldest pending job they are allowed to run, report
//! completion, and send heartbeats. All operations take one internal lock,
//! so they are linearizable; durable state is written through a
//! [`JobLedger`] while the lock is held.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::model::{EvaluationReport, SubmissionStatus};
use crate::store::{RecordKind, Store, StoreError};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const DEFAULT_HEARTBEAT_WINDOW: Duration = Duration::from_secs(15);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Claimed,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationJob {
    pub job_id: String,
    pub submission_id: String,
    pub enqueued_at: DateTime<Utc>,
    pub state: JobState,
    /// Failed attempts so far.
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claimed_by: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<String>,
    /// Arrival order.
    pub seq: u64,
    /// Global order in which jobs were claimed, for the latest claim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claim_seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdminState {
    Active,
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Liveness {
    Alive,
    MissedHeartbeat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub worker_id: String,
    pub admin_state: AdminState,
    pub liveness: Liveness,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_job: Option<String>,
    pub completed_count: u64,
    /// Only jobs without a pool or with this pool are claimable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum JobResult {
    Evaluated {
        report: EvaluationReport,
    },
    /// The platform, not the submission, failed (sandbox could not be set
    /// up, worker crashed). Retried up to `max_attempts`.
    InfraFailure {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmissionInfo {
    pub status: SubmissionStatus,
    pub pool: Option<String>,
}

/// Durable side of the scheduler.
pub trait JobLedger: Send + Sync {
    fn lookup_submission(&self, submission_id: &str) -> Option<SubmissionInfo>;
    fn save_job(&self, job: &EvaluationJob);
    fn save_worker(&self, worker: &WorkerRecord);
    /// Records the terminal outcome of a submission: an evaluated report or
    /// an internal error after the last failed attempt.
    fn submission_finished(&self, submission_id: &str, result: &JobResult) -> Result<(), String>;
}

/// Monotonic time source, replaceable in tests.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

#[derive(Default)]
pub struct ManualClock(Mutex<Duration>);

impl ManualClock {
    pub fn advance(&self, by: Duration) {
        *self.0.lock() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.0.lock()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerConfig {
    pub max_attempts: u32,
    pub heartbeat_window: Duration,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { max_attempts: DEFAULT_MAX_ATTEMPTS, heartbeat_window: DEFAULT_HEARTBEAT_WINDOW }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchedulerError {
    #[error("unknown submission {0:?}")]
    UnknownSubmission(String),
    #[error("submission {id:?} is {status:?}, not queued")]
    NotQueued { id: String, status: SubmissionStatus },
    #[error("unknown worker {0:?}")]
    UnknownWorker(String),
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("job {job:?} is not claimed by worker {worker:?}")]
    NotClaimed { job: String, worker: String },
    #[error("worker {0:?} already holds a job")]
    WorkerBusy(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub pending: Vec<EvaluationJob>,
    pub claimed: Vec<EvaluationJob>,
    pub workers: Vec<WorkerRecord>,
    pub done: usize,
    pub failed: usize,
}

struct WorkerEntry {
    record: WorkerRecord,
    last_seen: Duration,
}

#[derive(Default)]
struct State {
    jobs: HashMap<String, EvaluationJob>,
    pending: VecDeque<String>,
    by_submission: HashMap<String, String>,
    workers: BTreeMap<String, WorkerEntry>,
    next_seq: u64,
    next_claim: u64,
}

pub struct Scheduler {
    state: Mutex<State>,
    work: Condvar,
    ledger: Arc<dyn JobLedger>,
    clock: Arc<dyn Clock>,
    config: SchedulerConfig,
}

impl Scheduler {
    pub fn new(ledger: Arc<dyn JobLedger>, clock: Arc<dyn Clock>, config: SchedulerConfig) -> Self {
        Scheduler { state: Mutex::new(State::default()), work: Condvar::new(), ledger, clock, config }
    }

    /// Rebuilds scheduler state from persisted records after a restart.
    /// Jobs that were claimed when the service stopped count as a failed
    /// attempt and go back to the queue (or fail for good). Workers start
    /// out as missing until they register again. Returns the recovered jobs.
    pub fn restore(
        ledger: Arc<dyn JobLedger>,
        clock: Arc<dyn Clock>,
        config: SchedulerConfig,
        mut jobs: Vec<EvaluationJob>,
        workers: Vec<WorkerRecord>,
    ) -> (Self, Vec<EvaluationJob>) {
        let sched = Scheduler::new(ledger, clock, config);
        let mut recovered = Vec::new();
        {
            let mut st = sched.state.lock();
            let now = sched.clock.now();
            for mut w in workers {
                w.current_job = None;
                w.liveness = Liveness::MissedHeartbeat;
                sched.ledger.save_worker(&w);
                st.workers.insert(w.worker_id.clone(), WorkerEntry { record: w, last_seen: now });
            }
            jobs.sort_by_key(|j| j.seq);
            let mut interrupted = Vec::new();
            for job in jobs {
                st.next_seq = st.next_seq.max(job.seq + 1);
                st.next_claim = st.next_claim.max(job.claim_seq.map_or(0, |c| c + 1));
                let id = job.job_id.clone();
                st.by_submission.insert(job.submission_id.clone(), id.clone());
                let mut job = job;
                // the submission may have been finished after the job record
                // was last written
                if matches!(job.state, JobState::Pending | JobState::Claimed) {
                    let status = sched.ledger.lookup_submission(&job.submission_id).map(|i| i.status);
                    let settled = match status {
                        Some(SubmissionStatus::Evaluated) => Some(JobState::Done),
                        Some(SubmissionStatus::InternalError) | None => Some(JobState::Failed),
                        _ => None,
                    };
                    if let Some(state) = settled {
                        job.state = state;
                        job.claimed_by = None;
                        sched.ledger.save_job(&job);
                    }
                }
                let state = job.state;
                st.jobs.insert(id.clone(), job);
                match state {
                    JobState::Pending => st.pending.push_back(id),
                    JobState::Claimed => interrupted.push(id),
                    JobState::Done | JobState::Failed => {}
                }
            }
            // interrupted jobs go behind everything that was still waiting
            for id in interrupted {
                sched.retry_or_fail(&mut st, &id, "service restarted while the job was running".into());
                recovered.push(st.jobs[&id].clone());
            }
        }
        (sched, recovered)
    }

    pub fn config(&self) -> SchedulerConfig {
        self.config
    }

    pub fn enqueue(&self, submission_id: &str) -> Result<EvaluationJob, SchedulerError> {
        let mut st = self.state.lock();
        if let Some(job) = st.by_submission.get(submission_id).and_then(|id| st.jobs.get(id)) {
            if matches!(job.state, JobState::Pending | JobState::Claimed) {
                return Ok(job.clone());
            }
        }
        let info = self
            .ledger
            .lookup_submission(submission_id)
            .ok_or_else(|| SchedulerError::UnknownSubmission(submission_id.into()))?;
        if info.status != SubmissionStatus::Queued {
            return Err(SchedulerError::NotQueued { id: submission_id.into(), status: info.status });
        }
        let seq = st.next_seq;
        st.next_seq += 1;
        let job = EvaluationJob {
            job_id: format!("job-{submission_id}"),
            submission_id: submission_id.into(),
            enqueued_at: Utc::now(),
            state: JobState::Pending,
            attempts: 0,
            claimed_by: None,
            pool: info.pool,
            seq,
            claim_seq: None,
            last_error: None,
        };
        self.ledger.save_job(&job);
        st.by_submission.insert(job.submission_id.clone(), job.job_id.clone());
        st.pending.push_back(job.job_id.clone());
        st.jobs.insert(job.job_id.clone(), job.clone());
        drop(st);
        self.work.notify_all();
        Ok(job)
    }

    /// Adds a worker, or revives a known one. A job still attributed to a
    /// previous incarnation of the worker goes back to the queue.
    pub fn register_worker(&self, worker_id: &str, pool: Option<String>) -> WorkerRecord {
        let mut st = self.state.lock();
        let now = self.clock.now();
        let stale = st.workers.get(worker_id).and_then(|w| w.record.current_job.clone());
        if let Some(job) = stale {
            self.retry_or_fail(&mut st, &job, format!("worker {worker_id} re-registered while holding the job"));
        }
        let entry = st.workers.entry(worker_id.to_string()).or_insert_with(|| WorkerEntry {
            record: WorkerRecord {
                worker_id: worker_id.into(),
                admin_state: AdminState::Active,
                liveness: Liveness::Alive,
                current_job: None,
                completed_count: 0,
                pool: None,
            },
            last_seen: now,
        });
        entry.last_seen = now;
        entry.record.liveness = Liveness::Alive;
        entry.record.current_job = None;
        entry.record.pool = pool;
        let record = entry.record.clone();
        self.ledger.save_worker(&record);
        record
    }

    fn touch(&self, st: &mut State, worker_id: &str) -> Result<(), SchedulerError> {
        let now = self.clock.now();
        let w = st.workers.get_mut(worker_id).ok_or_else(|| SchedulerError::UnknownWorker(worker_id.into()))?;
        w.last_seen = now;
        if w.record.liveness != Liveness::Alive {
            w.record.liveness = Liveness::Alive;
            self.ledger.save_worker(&w.record);
        }
        Ok(())
    }

    pub fn heartbeat(&self, worker_id: &str) -> Result<(), SchedulerError> {
        let mut st = self.state.lock();
        self.touch(&mut st, worker_id)
    }

    /// Hands the oldest claimable pending job to `worker_id`. Disabled
    /// workers get `None` and leave the queue untouched.
    pub fn claim_next(&self, worker_id: &str) -> Result<Option<EvaluationJob>, SchedulerError> {
        let mut st = self.state.lock();
        self.touch(&mut st, worker_id)?;
        let worker = &st.workers[worker_id].record;
        if worker.admin_state == AdminState::Disabled {
            return Ok(None);
        }
        if worker.current_job.is_some() {
            return Err(SchedulerError::WorkerBusy(worker_id.into()));
        }
        let pool = worker.pool.clone();
        let pos = st.pending.iter().position(|id| st.jobs.get(id).is_some_and(|j| j.pool.is_none() || j.pool == pool));
        let Some(pos) = pos else { return Ok(None) };
        let job_id = st.pending.remove(pos).expect("position is in range");
        let claim = st.next_claim;
        st.next_claim += 1;
        let job = st.jobs.get_mut(&job_id).expect("pending job is known");
        job.state = JobState::Claimed;
        job.claimed_by = Some(worker_id.into());
        job.claim_seq = Some(claim);
        let job = job.clone();
        self.ledger.save_job(&job);
        let w = &mut st.workers.get_mut(worker_id).expect("worker checked above").record;
        w.current_job = Some(job_id);
        self.ledger.save_worker(w);
        Ok(Some(job))
    }

    /// Blocks until a job may be available or `timeout` passes.
    pub fn wait_for_work(&self, timeout: Duration) {
        let mut st = self.state.lock();
        if st.pending.is_empty() {
            self.work.wait_for(&mut st, timeout);
        }
    }

    pub fn complete(&self, worker_id: &str, job_id: &str, result: JobResult) -> Result<EvaluationJob, SchedulerError> {
        let mut st = self.state.lock();
        let _ = self.touch(&mut st, worker_id);
        let job = st.jobs.get(job_id).ok_or_else(|| SchedulerError::UnknownJob(job_id.into()))?;
        if job.state != JobState::Claimed || job.claimed_by.as_deref() != Some(worker_id) {
            warn!(job_id, worker_id, "completion for a job this worker does not hold; ignored");
            return Err(SchedulerError::NotClaimed { job: job_id.into(), worker: worker_id.into() });
        }
        let submission_id = job.submission_id.clone();
        if let Some(w) = st.workers.get_mut(worker_id) {
            w.record.current_job = None;
            if matches!(result, JobResult::Evaluated { .. }) {
                w.record.completed_count += 1;
            }
            self.ledger.save_worker(&w.record);
        }
        match result {
            JobResult::Evaluated { .. } => {
                let job = st.jobs.get_mut(job_id).expect("checked above");
                job.state = JobState::Done;
                job.claimed_by = None;
                if let Err(e) = self.ledger.submission_finished(&submission_id, &result) {
                    warn!(job_id, error = %e, "could not record evaluation; marking submission failed");
                    let failure = JobResult::InfraFailure { reason: format!("could not record evaluation: {e}") };
                    let _ = self.ledger.submission_finished(&submission_id, &failure);
                    let job = st.jobs.get_mut(job_id).expect("checked above");
                    job.state = JobState::Failed;
                    job.last_error = Some(e);
                }
                let job = st.jobs[job_id].clone();
                self.ledger.save_job(&job);
                Ok(job)
            }
            JobResult::InfraFailure { reason } => {
                self.retry_or_fail(&mut st, job_id, reason);
                drop(st);
                self.work.notify_all();
                let st = self.state.lock();
                Ok(st.jobs[job_id].clone())
            }
        }
    }

    /// Counts a failed attempt; re-queues at the tail or gives up.
    fn retry_or_fail(&self, st: &mut State, job_id: &str, reason: String) {
        let Some(job) = st.jobs.get_mut(job_id) else {
            return;
        };
        if let Some(worker) = job.claimed_by.take() {
            if let Some(w) = st.workers.get_mut(&worker) {
                if w.record.current_job.as_deref() == Some(job_id) {
                    w.record.current_job = None;
                    self.ledger.save_worker(&w.record);
                }
            }
        }
        let job = st.jobs.get_mut(job_id).expect("present above");
        job.attempts += 1;
        job.last_error = Some(reason.clone());
        if job.attempts >= self.config.max_attempts {
            job.state = JobState::Failed;
            let job = job.clone();
            info!(job_id, attempts = job.attempts, "job failed permanently");
            self.ledger.save_job(&job);
            let result = JobResult::InfraFailure { reason };
            if let Err(e) = self.ledger.submission_finished(&job.submission_id, &result) {
                warn!(job_id, error = %e, "could not mark submission as failed");
            }
        } else {
            job.state = JobState::Pending;
            let job = job.clone();
            self.ledger.save_job(&job);
            st.pending.push_back(job.job_id);
        }
    }

    pub fn set_worker_state(&self, worker_id: &str, state: AdminState) -> Result<WorkerRecord, SchedulerError> {
        let mut st = self.state.lock();
        let w = st.workers.get_mut(worker_id).ok_or_else(|| SchedulerError::UnknownWorker(worker_id.into()))?;
        w.record.admin_state = state;
        self.ledger.save_worker(&w.record);
        let record = w.record.clone();
        drop(st);
        self.work.notify_all();
        Ok(record)
    }

    /// Marks workers silent for longer than the heartbeat window as missing
    /// and returns their jobs to the queue. Returns the affected jobs.
    pub fn reap_dead_workers(&self) -> Vec<EvaluationJob> {
        let mut st = self.state.lock();
        let now = self.clock.now();
        let window = self.config.heartbeat_window;
        let dead: Vec<(String, Option<String>)> = st
            .workers
            .values()
            .filter(|w| now.saturating_sub(w.last_seen) > window)
            .filter(|w| w.record.liveness == Liveness::Alive || w.record.current_job.is_some())
            .map(|w| (w.record.worker_id.clone(), w.record.current_job.clone()))
            .collect();
        let mut affected = Vec::new();
        for (worker_id, job) in dead {
            if let Some(w) = st.workers.get_mut(&worker_id) {
                w.record.liveness = Liveness::MissedHeartbeat;
                self.ledger.save_worker(&w.record);
            }
            if let Some(job_id) = job {
                warn!(worker_id, job_id, "worker missed heartbeats; re-queueing its job");
                self.retry_or_fail(&mut st, &job_id, format!("worker {worker_id} stopped responding"));
                affected.push(st.jobs[&job_id].clone());
            }
        }
        drop(st);
        if !affected.is_empty() {
            self.work.notify_all();
        }
        affected
    }

    pub fn job(&self, job_id: &str) -> Option<EvaluationJob> {
        self.state.lock().jobs.get(job_id).cloned()
    }

    pub fn job_for_submission(&self, submission_id: &str) -> Option<EvaluationJob> {
        let st = self.state.lock();
        st.by_submission.get(submission_id).and_then(|id| st.jobs.get(id)).cloned()
    }

    pub fn worker(&self, worker_id: &str) -> Option<WorkerRecord> {
        self.state.lock().workers.get(worker_id).map(|w| w.record.clone())
    }

    pub fn snapshot(&self) -> Snapshot {
        let st = self.state.lock();
        let pending = st.pending.iter().filter_map(|id| st.jobs.get(id)).cloned().collect();
        let mut claimed: Vec<_> = st.jobs.values().filter(|j| j.state == JobState::Claimed).cloned().collect();
        claimed.sort_by_key(|j| j.seq);
        Snapshot {
            pending,
            claimed,
            workers: st.workers.values().map(|w| w.record.clone()).collect(),
            done: st.jobs.values().filter(|j| j.state == JobState::Done).count(),
            failed: st.jobs.values().filter(|j| j.state == JobState::Failed).count(),
        }
    }
}

/// In-memory [`JobLedger`] for tests and dry runs.
#[derive(Default)]
pub struct MemoryLedger {
    submissions: Mutex<BTreeMap<String, (SubmissionInfo, Option<JobResult>)>>,
    jobs: Mutex<BTreeMap<String, EvaluationJob>>,
    workers: Mutex<BTreeMap<String, WorkerRecord>>,
}

impl MemoryLedger {
    pub fn add_submission(&self, id: &str, pool: Option<String>) {
        self.submissions.lock().insert(id.into(), (SubmissionInfo { status: SubmissionStatus::Queued, pool }, None));
    }

    pub fn status(&self, id: &str) -> Option<SubmissionStatus> {
        self.submissions.lock().get(id).map(|(i, _)| i.status)
    }

    pub fn set_status(&self, id: &str, status: SubmissionStatus) {
        if let Some((info, _)) = self.submissions.lock().get_mut(id) {
            info.status = status;
        }
    }

    pub fn result(&self, id: &str) -> Option<JobResult> {
        self.submissions.lock().get(id).and_then(|(_, r)| r.clone())
    }

    pub fn saved_jobs(&self) -> Vec<EvaluationJob> {
        self.jobs.lock().values().cloned().collect()
    }

    pub fn saved_workers(&self) -> Vec<WorkerRecord> {
        self.workers.lock().values().cloned().collect()
    }
}

impl JobLedger for MemoryLedger {
    fn lookup_submission(&self, submission_id: &str) -> Option<SubmissionInfo> {
        self.submissions.lock().get(submission_id).map(|(i, _)| i.clone())
    }

    fn save_job(&self, job: &EvaluationJob) {
        self.jobs.lock().insert(job.job_id.clone(), job.clone());
    }

    fn save_worker(&self, worker: &WorkerRecord) {
        self.workers.lock().insert(worker.worker_id.clone(), worker.clone());
    }

    fn submission_finished(&self, submission_id: &str, result: &JobResult) -> Result<(), String> {
        let mut subs = self.submissions.lock();
        let (info, slot) = subs.get_mut(submission_id).ok_or("unknown submission")?;
        if info.status.is_terminal() {
            return Err(format!("submission already {:?}", info.status));
        }
        info.status = match result {
            JobResult::Evaluated { .. } => SubmissionStatus::Evaluated,
            JobResult::InfraFailure { .. } => SubmissionStatus::InternalError,
        };
        *slot = Some(result.clone());
        Ok(())
    }
}

impl JobLedger for Store {
    fn lookup_submission(&self, submission_id: &str) -> Option<SubmissionInfo> {
        let sub = self.submission(submission_id).ok()?;
        let pool = self.task(&sub.task_id).ok().and_then(|t| t.pool);
        Some(SubmissionInfo { status: sub.status, pool })
    }

    fn save_job(&self, job: &EvaluationJob) {
        if let Err(e) = self.put_record(RecordKind::Job, &job.job_id, job) {
            warn!(job_id = %job.job_id, error = %e, "could not persist job");
        }
    }

    fn save_worker(&self, worker: &WorkerRecord) {
        if let Err(e) = self.put_record(RecordKind::Worker, &worker.worker_id, worker) {
            warn!(worker_id = %worker.worker_id, error = %e, "could not persist worker");
        }
    }

    fn submission_finished(&self, submission_id: &str, result: &JobResult) -> Result<(), String> {
        let outcome = match result {
            JobResult::Evaluated { report } => {
                let task =
                    self.submission(submission_id).and_then(|s| self.task(&s.task_id)).map_err(|e| e.to_string())?;
                report.check_against(&task)?;
                self.finish_submission(submission_id, report.clone())
            }
            JobResult::InfraFailure { reason } => self.fail_submission(submission_id, reason),
        };
        outcome.map(|_| ()).map_err(|e| e.to_string())
    }
}

/// Persisted jobs and workers, for [`Scheduler::restore`].
pub fn load_persisted(store: &Store) -> Result<(Vec<EvaluationJob>, Vec<WorkerRecord>), StoreError> {
    let jobs = store.list_records(RecordKind::Job)?.into_iter().map(|(_, v)| v.data).collect();
    let workers = store.list_records(RecordKind::Worker)?.into_iter().map(|(_, v)| v.data).collect();
    Ok((jobs, workers))
}

/// Restores a scheduler from the store after a restart and re-enqueues
/// queued submissions that never got a job record, which happens when the
/// service stopped between persisting a submission and enqueueing it.
/// In-progress submissions without a job cannot be resumed and are failed.
pub fn recover(
    store: Arc<Store>,
    clock: Arc<dyn Clock>,
    config: SchedulerConfig,
) -> Result<(Scheduler, Vec<EvaluationJob>), StoreError> {
    let (jobs, workers) = load_persisted(&store)?;
    let known: std::collections::HashSet<String> = jobs.iter().map(|j| j.submission_id.clone()).collect();
    let (sched, mut recovered) = Scheduler::restore(store.clone(), clock, config, jobs, workers);
    let mut orphans: Vec<_> = store.submissions()?.into_iter().filter(|s| !known.contains(&s.submission_id)).collect();
    orphans.sort_by(|a, b| (a.submitted_at, &a.submission_id).cmp(&(b.submitted_at, &b.submission_id)));
    for sub in orphans {
        match sub.status {
            SubmissionStatus::Queued => match sched.enqueue(&sub.submission_id) {
                Ok(job) => recovered.push(job),
                Err(e) => {
                    warn!(submission = %sub.submission_id, error = %e, "could not re-enqueue")
                }
            },
            SubmissionStatus::Compiling | SubmissionStatus::Running => {
                store.fail_submission(&sub.submission_id, "evaluation state lost in a restart")?;
            }
            SubmissionStatus::Evaluated | SubmissionStatus::InternalError => {}
        }
    }
    Ok((sched, recovered))
}
