//! The running service minus HTTP: store, scheduler, sandbox backend,
//! in-process workers and the reaper that requeues jobs of silent workers.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use anyhow::Context;
use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use sae_core::materials::{course_state, CourseCalendar};
use sae_core::model::{Submission, TaskSpec};
use sae_core::sandbox::{
    BundleStore, IsolationMode, NullBackend, ProcessBackend, ProcessBackendConfig, SandboxBackend,
};
use sae_core::scheduler::{recover, Scheduler, SystemClock};
use sae_core::store::{Store, StoreError};
use sae_core::worker::{spawn_worker, LocalLink, WorkerHandle, WorkerOptions};
use tracing::{info, warn};

use crate::auth::{seed_users, Sessions};
use crate::config::{BackendKind, Config, IsolationSetting};

pub fn backend_from_config(config: &Config) -> anyhow::Result<Arc<dyn SandboxBackend>> {
    let bundles = config.sandbox.bundles_dir.clone().map(BundleStore::new).unwrap_or_else(BundleStore::empty);
    match config.sandbox.backend {
        BackendKind::Null => Ok(Arc::new(NullBackend::default())),
        BackendKind::Process => {
            let isolation = match config.sandbox.isolation {
                IsolationSetting::Auto => None,
                IsolationSetting::Privileged => Some(IsolationMode::Privileged),
                IsolationSetting::UserNamespace => Some(IsolationMode::UserNamespace),
                IsolationSetting::Unisolated => Some(IsolationMode::Unisolated),
            };
            let backend = ProcessBackend::new(ProcessBackendConfig {
                work_root: config.sandbox_dir(),
                bundles,
                max_concurrent: config.sandbox.max_concurrent,
                isolation,
                ..Default::default()
            })
            .with_context(|| format!("cannot prepare sandbox directory {}", config.sandbox_dir().display()))?;
            Ok(Arc::new(backend))
        }
    }
}

/// Where the store lives below the configured data directory.
pub fn store_dir(config: &Config) -> std::path::PathBuf {
    config.data_dir.join("store")
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("submission stored but not queued: {0}")]
    Enqueue(String),
}

pub struct Platform {
    config: Config,
    store: Arc<Store>,
    scheduler: Arc<Scheduler>,
    backend: Arc<dyn SandboxBackend>,
    sessions: Sessions,
    workers: Mutex<Vec<WorkerHandle>>,
    worker_seq: AtomicUsize,
    stop: Arc<AtomicBool>,
    reaper: Mutex<Option<JoinHandle<()>>>,
}

impl Platform {
    /// Opens the store, restores the queue and starts the reaper. Workers
    /// are started separately.
    pub fn open(config: Config, backend: Arc<dyn SandboxBackend>) -> anyhow::Result<Arc<Platform>> {
        let dir = store_dir(&config);
        let store = Arc::new(Store::open(&dir).with_context(|| format!("cannot open store at {}", dir.display()))?);
        if let Some(path) = &config.users_file {
            let changed = seed_users(&store, path)?;
            info!(changed, file = %path.display(), "user seed applied");
        }
        let (scheduler, recovered) =
            recover(store.clone(), Arc::new(SystemClock::default()), config.scheduler.scheduler_config())
                .context("cannot restore the job queue")?;
        if !recovered.is_empty() {
            info!(jobs = recovered.len(), "requeued work found at startup");
        }
        let scheduler = Arc::new(scheduler);
        let stop = Arc::new(AtomicBool::new(false));
        let reaper = {
            let (scheduler, stop, every) = (scheduler.clone(), stop.clone(), config.scheduler.reap_every());
            thread::Builder::new().name("reaper".into()).spawn(move || reap_loop(&scheduler, &stop, every))?
        };
        let sessions = Sessions::new(chrono::Duration::hours(config.session_hours as i64));
        Ok(Arc::new(Platform {
            config,
            store,
            scheduler,
            backend,
            sessions,
            workers: Mutex::new(Vec::new()),
            worker_seq: AtomicUsize::new(0),
            stop,
            reaper: Mutex::new(Some(reaper)),
        }))
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn scheduler(&self) -> &Arc<Scheduler> {
        &self.scheduler
    }

    pub fn backend(&self) -> &Arc<dyn SandboxBackend> {
        &self.backend
    }

    pub fn sessions(&self) -> &Sessions {
        &self.sessions
    }

    /// Starts `n` in-process workers named `local-<k>`, owned by the
    /// platform.
    pub fn start_workers(&self, n: usize) -> anyhow::Result<Vec<String>> {
        let mut ids = Vec::new();
        for _ in 0..n {
            let k = self.worker_seq.fetch_add(1, Ordering::SeqCst) + 1;
            let handle = self.spawn_worker(WorkerOptions::new(format!("local-{k}"))).map_err(anyhow::Error::msg)?;
            ids.push(handle.worker_id.clone());
            self.workers.lock().push(handle);
        }
        Ok(ids)
    }

    /// Starts an in-process worker and hands its handle to the caller.
    pub fn spawn_worker(&self, opts: WorkerOptions) -> Result<WorkerHandle, String> {
        let link = Arc::new(LocalLink { scheduler: self.scheduler.clone(), store: self.store.clone() });
        spawn_worker(link, self.store.clone(), self.backend.clone(), opts)
    }

    pub fn calendar(&self) -> Result<CourseCalendar, StoreError> {
        Ok(CourseCalendar {
            start_date: self.config.course.start_date,
            course_end: self.config.course.end,
            day_override: course_state(&self.store)?.day_override,
        })
    }

    pub fn current_day(&self, now: DateTime<Utc>) -> Result<u32, StoreError> {
        Ok(self.calendar()?.current_day(now))
    }

    /// The task if it exists and is unlocked on `day`.
    pub fn unlocked_task(&self, task_id: &str, day: u32) -> Result<Option<TaskSpec>, StoreError> {
        match self.store.task(task_id) {
            Ok(task) if task.unlock_day <= day => Ok(Some(task)),
            Ok(_) | Err(StoreError::NotFound { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Persists and enqueues a submission whose files were already checked
    /// against the task.
    pub fn submit(
        &self,
        user_id: &str,
        task: &TaskSpec,
        language: &str,
        files: &BTreeMap<String, Vec<u8>>,
    ) -> Result<Submission, SubmitError> {
        let id = uuid::Uuid::now_v7().simple().to_string();
        let sub = self.store.create_submission(&id, user_id, &task.task_id, language, files, Utc::now())?;
        if let Err(e) = self.scheduler.enqueue(&id) {
            warn!(submission_id = %id, error = %e, "enqueue failed");
            let _ = self.store.fail_submission(&id, "could not be queued for evaluation");
            return Err(SubmitError::Enqueue(e.to_string()));
        }
        info!(submission_id = %id, user_id, task_id = %task.task_id, "submission queued");
        Ok(sub)
    }

    /// Stops workers (each finishes its current job) and the reaper.
    pub fn shutdown(&self) {
        let workers: Vec<_> = self.workers.lock().drain(..).collect();
        for w in workers {
            w.stop();
        }
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.reaper.lock().take() {
            let _ = t.join();
        }
    }
}

impl Drop for Platform {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn reap_loop(scheduler: &Scheduler, stop: &AtomicBool, every: Duration) {
    let tick = Duration::from_millis(10).min(every);
    let mut waited = Duration::ZERO;
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(tick);
        waited += tick;
        if waited < every {
            continue;
        }
        waited = Duration::ZERO;
        let requeued = scheduler.reap_dead_workers();
        if !requeued.is_empty() {
            warn!(jobs = requeued.len(), "reclaimed jobs from silent workers");
        }
    }
}
