//! Embedded persistence.
//!
//! On-disk layout below the store root:
//!
//! ```text
//! blobs/<first two hex chars>/<sha256>   immutable, content addressed
//! records/<kind>/<id>.json               {"revision": n, "data": {...}}
//! tmp/                                   staging area, emptied on open
//! ```
//!
//! Every write goes to `tmp/`, is fsynced and then renamed into place, so a
//! record is either the old or the new version after a crash, never a mix.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::append_file;
use crate::model::{EvaluationReport, Submission, SubmissionStatus, TaskSpec};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlobRef {
    pub hash: String,
    pub size: u64,
}

impl BlobRef {
    pub fn of(data: &[u8]) -> Self {
        BlobRef { hash: hex::encode(Sha256::digest(data)), size: data.len() as u64 }
    }
}

impl fmt::Display for BlobRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.hash)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Task,
    Submission,
    Job,
    Worker,
    User,
    Material,
    Course,
}

impl RecordKind {
    pub const ALL: [RecordKind; 7] = [
        RecordKind::Task,
        RecordKind::Submission,
        RecordKind::Job,
        RecordKind::Worker,
        RecordKind::User,
        RecordKind::Material,
        RecordKind::Course,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            RecordKind::Task => "tasks",
            RecordKind::Submission => "submissions",
            RecordKind::Job => "jobs",
            RecordKind::Worker => "workers",
            RecordKind::User => "users",
            RecordKind::Material => "materials",
            RecordKind::Course => "course",
        }
    }

    fn index(self) -> usize {
        RecordKind::ALL.iter().position(|k| *k == self).unwrap_or(0)
    }
}

/// Points at which a fault hook may simulate a crash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultPoint {
    /// Half of a blob has reached the staging file.
    BlobWrite,
    /// Half of a record has reached the staging file.
    RecordWrite(RecordKind),
    /// The staging file is complete but not yet renamed into place.
    RecordRename(RecordKind),
}

type FaultHook = dyn Fn(FaultPoint) -> bool + Send + Sync;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{kind} {id:?} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("blob {0} is corrupt")]
    CorruptBlob(String),
    #[error("record {0} is corrupt: {1}")]
    CorruptRecord(String, String),
    #[error("store crashed (fault injection)")]
    Crashed,
    #[error("{0}")]
    Conflict(String),
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
}

impl StoreError {
    fn not_found(kind: RecordKind, id: &str) -> Self {
        StoreError::NotFound { kind: kind.dir_name(), id: id.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub revision: u64,
    pub data: T,
}

pub struct Store {
    root: PathBuf,
    locks: [Mutex<()>; 7],
    fault: RwLock<Option<Arc<FaultHook>>>,
    crashed: AtomicBool,
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Store").field("root", &self.root).finish()
    }
}

/// Staging files older than this are leftovers of a crash. Younger ones
/// may belong to another process sharing the store (a CLI import next to a
/// running service) and are kept.
const STALE_STAGING: Duration = Duration::from_secs(300);

fn clear_stale_staging(tmp: &Path) -> io::Result<()> {
    let now = SystemTime::now();
    for entry in fs::read_dir(tmp)? {
        let entry = entry?;
        let modified = entry.metadata()?.modified()?;
        if now.duration_since(modified).unwrap_or_default() >= STALE_STAGING {
            let _ = fs::remove_file(entry.path());
        }
    }
    Ok(())
}

fn sync_dir(path: &Path) -> io::Result<()> {
    fs::File::open(path)?.sync_all()
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("blobs"))?;
        for kind in RecordKind::ALL {
            fs::create_dir_all(root.join("records").join(kind.dir_name()))?;
        }
        let tmp = root.join("tmp");
        fs::create_dir_all(&tmp)?;
        clear_stale_staging(&tmp)?;
        Ok(Store { root, locks: Default::default(), fault: RwLock::new(None), crashed: AtomicBool::new(false) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Installs a hook consulted at every [`FaultPoint`]. When it returns
    /// true the store behaves as if the process died there: the operation
    /// fails and every later operation fails too.
    pub fn set_fault_hook<F>(&self, hook: F)
    where
        F: Fn(FaultPoint) -> bool + Send + Sync + 'static,
    {
        *self.fault.write() = Some(Arc::new(hook));
    }

    fn check_alive(&self) -> Result<(), StoreError> {
        if self.crashed.load(Ordering::SeqCst) {
            Err(StoreError::Crashed)
        } else {
            Ok(())
        }
    }

    fn fault(&self, point: FaultPoint) -> bool {
        let hook = self.fault.read().clone();
        if hook.is_some_and(|h| h(point)) {
            self.crashed.store(true, Ordering::SeqCst);
            true
        } else {
            false
        }
    }

    /// Writes `data` to `dest` through a staging file.
    fn write_atomic(
        &self,
        dest: &Path,
        data: &[u8],
        partial: FaultPoint,
        before_rename: Option<FaultPoint>,
    ) -> Result<(), StoreError> {
        let tmp = self.root.join("tmp").join(uuid::Uuid::now_v7().simple().to_string());
        let mut file = fs::File::create(&tmp)?;
        if self.fault(partial) {
            file.write_all(&data[..data.len() / 2])?;
            return Err(StoreError::Crashed);
        }
        file.write_all(data)?;
        file.sync_all()?;
        drop(file);
        if before_rename.is_some_and(|p| self.fault(p)) {
            return Err(StoreError::Crashed);
        }
        fs::rename(&tmp, dest)?;
        if let Some(parent) = dest.parent() {
            sync_dir(parent)?;
        }
        Ok(())
    }

    fn blob_path(&self, hash: &str) -> PathBuf {
        let prefix = hash.get(..2).unwrap_or("00");
        self.root.join("blobs").join(prefix).join(hash)
    }

    pub fn put_blob(&self, data: &[u8]) -> Result<BlobRef, StoreError> {
        self.check_alive()?;
        let r = BlobRef::of(data);
        let path = self.blob_path(&r.hash);
        if path.exists() {
            return Ok(r);
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.write_atomic(&path, data, FaultPoint::BlobWrite, None)?;
        Ok(r)
    }

    pub fn has_blob(&self, r: &BlobRef) -> bool {
        self.blob_path(&r.hash).is_file()
    }

    pub fn get_blob(&self, r: &BlobRef) -> Result<Vec<u8>, StoreError> {
        self.check_alive()?;
        let data = match fs::read(self.blob_path(&r.hash)) {
            Ok(d) => d,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound { kind: "blob", id: r.hash.clone() })
            }
            Err(e) => return Err(e.into()),
        };
        if data.len() as u64 != r.size {
            return Err(StoreError::CorruptBlob(r.hash.clone()));
        }
        Ok(data)
    }

    fn record_path(&self, kind: RecordKind, id: &str) -> Result<PathBuf, StoreError> {
        let valid = !id.is_empty()
            && id.len() <= 200
            && !id.starts_with('.')
            && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.@".contains(c));
        if !valid {
            return Err(StoreError::Conflict(format!("invalid record id {id:?}")));
        }
        Ok(self.root.join("records").join(kind.dir_name()).join(format!("{id}.json")))
    }

    fn read_versioned<T: DeserializeOwned>(&self, path: &Path) -> Result<Option<Versioned<T>>, StoreError> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| StoreError::CorruptRecord(path.display().to_string(), e.to_string())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn write_versioned<T: Serialize>(
        &self,
        kind: RecordKind,
        path: &Path,
        revision: u64,
        data: &T,
    ) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec_pretty(&Versioned { revision, data })
            .map_err(|e| StoreError::CorruptRecord(path.display().to_string(), e.to_string()))?;
        self.write_atomic(path, &bytes, FaultPoint::RecordWrite(kind), Some(FaultPoint::RecordRename(kind)))
    }

    pub fn get_record<T: DeserializeOwned>(
        &self,
        kind: RecordKind,
        id: &str,
    ) -> Result<Option<Versioned<T>>, StoreError> {
        self.check_alive()?;
        let path = self.record_path(kind, id)?;
        self.read_versioned(&path)
    }

    /// Writes a record and returns its new revision.
    pub fn put_record<T: Serialize>(&self, kind: RecordKind, id: &str, data: &T) -> Result<u64, StoreError> {
        self.check_alive()?;
        let path = self.record_path(kind, id)?;
        let _guard = self.locks[kind.index()].lock();
        let current: Option<Versioned<serde_json::Value>> = self.read_versioned(&path)?;
        let revision = current.map_or(1, |v| v.revision + 1);
        self.write_versioned(kind, &path, revision, data)?;
        Ok(revision)
    }

    /// Read-modify-write under the kind's writer lock. The closure sees the
    /// current value and may veto the write by returning an error.
    pub fn update_record<T, R, F>(&self, kind: RecordKind, id: &str, f: F) -> Result<(R, Versioned<T>), StoreError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce(&mut T) -> Result<R, StoreError>,
    {
        self.check_alive()?;
        let path = self.record_path(kind, id)?;
        let _guard = self.locks[kind.index()].lock();
        let Some(mut current) = self.read_versioned::<T>(&path)? else {
            return Err(StoreError::not_found(kind, id));
        };
        let out = f(&mut current.data)?;
        current.revision += 1;
        self.write_versioned(kind, &path, current.revision, &current.data)?;
        Ok((out, current))
    }

    /// Writes the record only if it does not exist yet.
    pub fn create_record<T: Serialize>(&self, kind: RecordKind, id: &str, data: &T) -> Result<(), StoreError> {
        self.check_alive()?;
        let path = self.record_path(kind, id)?;
        let _guard = self.locks[kind.index()].lock();
        if path.exists() {
            return Err(StoreError::Conflict(format!("{} {id:?} already exists", kind.dir_name())));
        }
        self.write_versioned(kind, &path, 1, data)
    }

    pub fn delete_record(&self, kind: RecordKind, id: &str) -> Result<bool, StoreError> {
        self.check_alive()?;
        let path = self.record_path(kind, id)?;
        let _guard = self.locks[kind.index()].lock();
        match fs::remove_file(&path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    /// All records of a kind, ordered by id.
    pub fn list_records<T: DeserializeOwned>(
        &self,
        kind: RecordKind,
    ) -> Result<Vec<(String, Versioned<T>)>, StoreError> {
        self.check_alive()?;
        let dir = self.root.join("records").join(kind.dir_name());
        let mut out = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(id) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".json")) else {
                continue;
            };
            let id = id.to_string();
            if let Some(v) = self.read_versioned(&path)? {
                out.push((id, v));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    pub fn task(&self, id: &str) -> Result<TaskSpec, StoreError> {
        self.get_record(RecordKind::Task, id)?
            .map(|v| v.data)
            .ok_or_else(|| StoreError::not_found(RecordKind::Task, id))
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>, StoreError> {
        Ok(self.list_records(RecordKind::Task)?.into_iter().map(|(_, v)| v.data).collect())
    }

    pub fn submission(&self, id: &str) -> Result<Submission, StoreError> {
        self.get_record(RecordKind::Submission, id)?
            .map(|v| v.data)
            .ok_or_else(|| StoreError::not_found(RecordKind::Submission, id))
    }

    pub fn submissions(&self) -> Result<Vec<Submission>, StoreError> {
        Ok(self.list_records(RecordKind::Submission)?.into_iter().map(|(_, v)| v.data).collect())
    }

    /// One user's submissions for one task, oldest first.
    pub fn submissions_for(&self, user_id: &str, task_id: &str) -> Result<Vec<Submission>, StoreError> {
        let mut subs: Vec<_> =
            self.submissions()?.into_iter().filter(|s| s.user_id == user_id && s.task_id == task_id).collect();
        subs.sort_by(|a, b| (a.submitted_at, &a.submission_id).cmp(&(b.submitted_at, &b.submission_id)));
        Ok(subs)
    }

    /// Persists a new queued submission. File blobs are written first and
    /// the record last, so after a crash the submission is either absent or
    /// complete.
    pub fn create_submission(
        &self,
        submission_id: &str,
        user_id: &str,
        task_id: &str,
        language: &str,
        files: &BTreeMap<String, Vec<u8>>,
        submitted_at: DateTime<Utc>,
    ) -> Result<Submission, StoreError> {
        let mut refs = BTreeMap::new();
        for (slot, data) in files {
            refs.insert(slot.clone(), self.put_blob(data)?);
        }
        let sub = Submission {
            submission_id: submission_id.into(),
            user_id: user_id.into(),
            task_id: task_id.into(),
            files: refs,
            language: language.into(),
            submitted_at,
            status: SubmissionStatus::Queued,
            results: None,
            failure: None,
        };
        self.create_record(RecordKind::Submission, submission_id, &sub)?;
        Ok(sub)
    }

    pub fn advance_submission(&self, id: &str, status: SubmissionStatus) -> Result<Submission, StoreError> {
        let (_, v) = self.update_record(RecordKind::Submission, id, |s: &mut Submission| {
            s.advance(status).map_err(|e| StoreError::Conflict(e.to_string()))
        })?;
        Ok(v.data)
    }

    pub fn finish_submission(&self, id: &str, report: EvaluationReport) -> Result<Submission, StoreError> {
        if !report.is_self_consistent() {
            return Err(StoreError::Conflict(format!("report for {id} fails its score self-check")));
        }
        let (_, v) = self.update_record(RecordKind::Submission, id, |s: &mut Submission| {
            s.finish(report).map_err(|e| StoreError::Conflict(e.to_string()))
        })?;
        Ok(v.data)
    }

    pub fn fail_submission(&self, id: &str, reason: &str) -> Result<Submission, StoreError> {
        let (_, v) = self.update_record(RecordKind::Submission, id, |s: &mut Submission| {
            s.fail(reason).map_err(|e| StoreError::Conflict(e.to_string()))
        })?;
        Ok(v.data)
    }

    /// Deterministic tar archive of a submission: one entry per slot plus
    /// `metadata.json`. Every header uses fixed owner, mode and mtime.
    pub fn bundle_submission(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        let sub = self.submission(id)?;
        let ext = self
            .task(&sub.task_id)
            .ok()
            .and_then(|t| t.language(&sub.language).map(|l| l.file_extension.clone()))
            .unwrap_or_default();
        let mut builder = tar::Builder::new(Vec::new());
        for (slot, blob) in &sub.files {
            let data = self.get_blob(blob)?;
            append_file(&mut builder, Path::new(&format!("{slot}{ext}")), &data)?;
        }
        let meta = BundleMetadata {
            submission_id: &sub.submission_id,
            task_id: &sub.task_id,
            user_id: &sub.user_id,
            language: &sub.language,
            submitted_at: sub.submitted_at.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            status: sub.status,
            score: sub.score(),
            max_score: sub.results.as_ref().map(|r| r.max_score),
        };
        let json = serde_json::to_vec_pretty(&meta).map_err(io::Error::other)?;
        append_file(&mut builder, Path::new("metadata.json"), &json)?;
        Ok(builder.into_inner()?)
    }
}

#[derive(Serialize)]
struct BundleMetadata<'a> {
    submission_id: &'a str,
    task_id: &'a str,
    user_id: &'a str,
    language: &'a str,
    submitted_at: String,
    status: SubmissionStatus,
    score: Option<u32>,
    max_score: Option<u32>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path()).unwrap();
        (dir, s)
    }

    #[test]
    fn blob_round_trip_and_dedup() {
        let (_d, s) = store();
        let a = s.put_blob(b"hello").unwrap();
        assert_eq!(s.get_blob(&a).unwrap(), b"hello");
        assert_eq!(s.put_blob(b"hello").unwrap(), a);
        let empty = s.put_blob(b"").unwrap();
        assert_eq!(empty.size, 0);
        assert_eq!(s.get_blob(&empty).unwrap(), b"");
        let missing = BlobRef::of(b"never stored");
        assert!(matches!(s.get_blob(&missing), Err(StoreError::NotFound { .. })));
    }

    #[test]
    fn revisions_increase() {
        let (_d, s) = store();
        assert_eq!(s.put_record(RecordKind::User, "alice", &1u32).unwrap(), 1);
        assert_eq!(s.put_record(RecordKind::User, "alice", &2u32).unwrap(), 2);
        let v: Versioned<u32> = s.get_record(RecordKind::User, "alice").unwrap().unwrap();
        assert_eq!((v.revision, v.data), (2, 2));
        assert!(s.create_record(RecordKind::User, "alice", &3u32).is_err());
        assert!(s.put_record(RecordKind::User, "../x", &1u32).is_err());
        assert!(s.delete_record(RecordKind::User, "alice").unwrap());
        assert!(!s.delete_record(RecordKind::User, "alice").unwrap());
    }

    #[test]
    fn records_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = Store::open(dir.path()).unwrap();
            s.put_record(RecordKind::Course, "course", &BTreeMap::from([("day", 3)])).unwrap();
        }
        let s = Store::open(dir.path()).unwrap();
        let v: Versioned<BTreeMap<String, i32>> = s.get_record(RecordKind::Course, "course").unwrap().unwrap();
        assert_eq!(v.data["day"], 3);
    }

    #[test]
    fn crash_mid_write_keeps_old_version() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = Store::open(dir.path()).unwrap();
            s.put_record(RecordKind::User, "bob", &"v1").unwrap();
            s.set_fault_hook(|p| p == FaultPoint::RecordWrite(RecordKind::User));
            assert!(matches!(s.put_record(RecordKind::User, "bob", &"v2"), Err(StoreError::Crashed)));
            assert!(matches!(s.put_blob(b"x"), Err(StoreError::Crashed)));
        }
        let s = Store::open(dir.path()).unwrap();
        let v: Versioned<String> = s.get_record(RecordKind::User, "bob").unwrap().unwrap();
        assert_eq!(v.data, "v1");
        // the half-written staging file is never read; once stale it is cleared
        let staged: Vec<_> = fs::read_dir(dir.path().join("tmp")).unwrap().map(|e| e.unwrap().path()).collect();
        assert_eq!(staged.len(), 1);
        let old = SystemTime::now() - STALE_STAGING - Duration::from_secs(1);
        fs::File::options().write(true).open(&staged[0]).unwrap().set_modified(old).unwrap();
        drop(s);
        Store::open(dir.path()).unwrap();
        assert_eq!(fs::read_dir(dir.path().join("tmp")).unwrap().count(), 0);
    }
}
