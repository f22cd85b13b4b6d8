use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use chrono::{TimeZone, Utc};

use sae_core::model::{
    CaseResult, CaseVerdict, CommandTemplate, EvaluationReport, LanguageProfile, SubmissionStatus, TaskSpec, TestCase,
    Weight,
};
use sae_core::scheduler::{recover, JobResult, JobState, Liveness, ManualClock, Scheduler, SchedulerConfig};
use sae_core::store::{BlobRef, FaultPoint, RecordKind, Store, StoreError};

const SLOTS: [&str; 5] = ["data_io", "orf_finder", "sequences", "transcription", "translation"];

fn task() -> TaskSpec {
    TaskSpec {
        task_id: "orf".into(),
        title: "ORF finder".into(),
        statement_ref: None,
        file_slots: SLOTS.iter().map(|s| s.to_string()).collect(),
        languages: vec![LanguageProfile {
            profile_id: "python3".into(),
            display_name: "Python 3 / CPython".into(),
            file_extension: ".py".into(),
            compile_command: None,
            run_command: CommandTemplate::new(["python3", "{orf_finder}"]),
        }],
        test_cases: (1..=3)
            .map(|i| TestCase {
                case_id: i.to_string(),
                stdin_ref: None,
                args: vec![],
                expected_ref: Some(BlobRef::of(b"ok\n")),
                weight: Weight::integer(1),
                feedback_visibility: Default::default(),
            })
            .collect(),
        checker: Default::default(),
        sandbox: Default::default(),
        max_score: 100,
        unlock_day: 0,
        pool: None,
    }
}

fn files(tag: &str) -> BTreeMap<String, Vec<u8>> {
    SLOTS.iter().map(|s| (s.to_string(), format!("# {s} {tag}\n").into_bytes())).collect()
}

fn report() -> EvaluationReport {
    let per_case = (1..=3)
        .map(|i| CaseResult {
            case_id: i.to_string(),
            verdict: CaseVerdict::Pass,
            message: String::new(),
            weight: Weight::integer(1),
            time_used: 0.01,
            memory_used: 1 << 20,
        })
        .collect();
    EvaluationReport::assemble(per_case, 100)
}

fn at(sec: u32) -> chrono::DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 5, 6, 9, 0, sec).unwrap()
}

fn open(dir: &Path) -> Arc<Store> {
    Arc::new(Store::open(dir).unwrap())
}

fn fresh_scheduler(store: &Arc<Store>) -> Scheduler {
    Scheduler::new(store.clone(), Arc::new(ManualClock::default()), SchedulerConfig::default())
}

/// Submit path as the service runs it: persist, then enqueue.
fn submit(store: &Arc<Store>, sched: &Scheduler, id: &str, sec: u32) -> Result<(), StoreError> {
    store.create_submission(id, "alice", "orf", "python3", &files(id), at(sec))?;
    sched.enqueue(id).map_err(|e| StoreError::Conflict(e.to_string()))?;
    Ok(())
}

fn count_fault_points() -> usize {
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path());
    store.put_record(RecordKind::Task, "orf", &task()).unwrap();
    let sched = fresh_scheduler(&store);
    let n = Arc::new(AtomicUsize::new(0));
    let counter = n.clone();
    store.set_fault_hook(move |_| {
        counter.fetch_add(1, Ordering::SeqCst);
        false
    });
    submit(&store, &sched, "s-new", 1).unwrap();
    n.load(Ordering::SeqCst)
}

#[test]
fn crash_at_every_fault_point_leaves_submission_whole_or_absent() {
    let points = count_fault_points();
    // five blobs, the submission record (write, rename), the job record
    assert_eq!(points, 5 + 2 + 2);
    let mut outcomes = BTreeMap::new();
    for crash_at in 0..=points {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = open(dir.path());
            store.put_record(RecordKind::Task, "orf", &task()).unwrap();
            let sched = fresh_scheduler(&store);
            submit(&store, &sched, "s-old", 0).unwrap();
            let seen = Arc::new(AtomicUsize::new(0));
            let counter = seen.clone();
            store.set_fault_hook(move |_| counter.fetch_add(1, Ordering::SeqCst) == crash_at);
            let result = submit(&store, &sched, "s-new", 1);
            // the job record write failing is logged, not returned
            assert_eq!(result.is_ok(), crash_at >= 7, "crash at {crash_at}: {result:?}");
        }

        let store = open(dir.path());
        // partial writes may linger in tmp/, but every published blob is whole
        for prefix in fs::read_dir(dir.path().join("blobs")).unwrap() {
            for blob in fs::read_dir(prefix.unwrap().path()).unwrap() {
                let path = blob.unwrap().path();
                let data = fs::read(&path).unwrap();
                assert_eq!(BlobRef::of(&data).hash, path.file_name().unwrap().to_str().unwrap());
            }
        }
        let (sched, _) = recover(store.clone(), Arc::new(ManualClock::default()), SchedulerConfig::default()).unwrap();
        let old = store.submission("s-old").unwrap();
        assert_eq!(old.status, SubmissionStatus::Queued);

        let present = match store.submission("s-new") {
            Ok(sub) => {
                assert_eq!(sub.status, SubmissionStatus::Queued);
                sub.check_against(&task()).unwrap();
                for (slot, blob) in &sub.files {
                    assert_eq!(store.get_blob(blob).unwrap(), files("s-new")[slot]);
                }
                let job = sched.job_for_submission("s-new").expect("queued submission has a job");
                assert_eq!(job.state, JobState::Pending);
                true
            }
            Err(StoreError::NotFound { .. }) => {
                assert!(sched.job_for_submission("s-new").is_none());
                false
            }
            Err(e) => panic!("crash at {crash_at}: {e}"),
        };
        assert_eq!(present, crash_at >= 7, "crash at {crash_at}");
        // arrival order survives the restart
        let order: Vec<_> = sched.snapshot().pending.iter().map(|j| j.submission_id.clone()).collect();
        let expected: Vec<&str> = if present { vec!["s-old", "s-new"] } else { vec!["s-old"] };
        assert_eq!(order, expected);
        outcomes.insert(crash_at, present);
    }
    assert!(outcomes.values().any(|p| *p) && outcomes.values().any(|p| !*p));
}

#[test]
fn claimed_jobs_are_recovered_to_pending_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    {
        let store = open(dir.path());
        store.put_record(RecordKind::Task, "orf", &task()).unwrap();
        let sched = fresh_scheduler(&store);
        for (i, id) in ["s1", "s2", "s3"].iter().enumerate() {
            submit(&store, &sched, id, i as u32).unwrap();
        }
        sched.register_worker("w1", None);
        sched.register_worker("w2", None);
        let j1 = sched.claim_next("w1").unwrap().unwrap();
        let j2 = sched.claim_next("w2").unwrap().unwrap();
        assert_eq!((j1.submission_id.as_str(), j2.submission_id.as_str()), ("s1", "s2"));
        store.advance_submission("s2", SubmissionStatus::Running).unwrap();
        sched.complete("w1", &j1.job_id, JobResult::Evaluated { report: report() }).unwrap();
        // the service dies with s2 claimed by w2
    }

    let store = open(dir.path());
    let (sched, recovered) =
        recover(store.clone(), Arc::new(ManualClock::default()), SchedulerConfig::default()).unwrap();
    assert_eq!(recovered.len(), 1);
    assert_eq!(recovered[0].submission_id, "s2");
    assert_eq!(recovered[0].attempts, 1);
    assert_eq!(recovered[0].state, JobState::Pending);

    let snap = sched.snapshot();
    assert!(snap.claimed.is_empty());
    let order: Vec<_> = snap.pending.iter().map(|j| j.submission_id.as_str()).collect();
    assert_eq!(order, ["s3", "s2"]);
    assert_eq!(snap.done, 1);
    for w in &snap.workers {
        assert_eq!(w.liveness, Liveness::MissedHeartbeat);
        assert!(w.current_job.is_none());
    }
    assert_eq!(store.submission("s1").unwrap().status, SubmissionStatus::Evaluated);
    assert_eq!(store.submission("s2").unwrap().status, SubmissionStatus::Running);

    // the retried job can run to completion; the repeated phase is a no-op
    sched.register_worker("w3", None);
    assert_eq!(sched.claim_next("w3").unwrap().unwrap().submission_id, "s3");
    sched.complete("w3", "job-s3", JobResult::Evaluated { report: report() }).unwrap();
    let j = sched.claim_next("w3").unwrap().unwrap();
    assert_eq!(j.submission_id, "s2");
    store.advance_submission("s2", SubmissionStatus::Running).unwrap();
    sched.complete("w3", &j.job_id, JobResult::Evaluated { report: report() }).unwrap();
    let s2 = store.submission("s2").unwrap();
    assert_eq!(s2.status, SubmissionStatus::Evaluated);
    assert_eq!(s2.score(), Some(100));
}

#[test]
fn crash_while_recording_a_result_keeps_the_job_recoverable() {
    for point in [FaultPoint::RecordWrite(RecordKind::Submission), FaultPoint::RecordRename(RecordKind::Submission)] {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = open(dir.path());
            store.put_record(RecordKind::Task, "orf", &task()).unwrap();
            let sched = fresh_scheduler(&store);
            submit(&store, &sched, "s1", 0).unwrap();
            sched.register_worker("w1", None);
            let job = sched.claim_next("w1").unwrap().unwrap();
            store.set_fault_hook(move |p| p == point);
            let _ = sched.complete("w1", &job.job_id, JobResult::Evaluated { report: report() });
        }
        let store = open(dir.path());
        let sub = store.submission("s1").unwrap();
        assert_eq!(sub.status, SubmissionStatus::Queued, "{point:?}");
        assert!(sub.results.is_none());
        let (sched, recovered) =
            recover(store.clone(), Arc::new(ManualClock::default()), SchedulerConfig::default()).unwrap();
        assert_eq!(recovered.len(), 1, "{point:?}");
        assert_eq!(sched.job("job-s1").unwrap().state, JobState::Pending);
    }
}

#[test]
fn in_progress_submission_without_a_job_becomes_internal_error() {
    let dir = tempfile::tempdir().unwrap();
    {
        let store = open(dir.path());
        store.put_record(RecordKind::Task, "orf", &task()).unwrap();
        store.create_submission("lost", "alice", "orf", "python3", &files("lost"), at(0)).unwrap();
        store.advance_submission("lost", SubmissionStatus::Compiling).unwrap();
    }
    let store = open(dir.path());
    let (sched, recovered) =
        recover(store.clone(), Arc::new(ManualClock::default()), SchedulerConfig::default()).unwrap();
    assert!(recovered.is_empty());
    assert!(sched.job_for_submission("lost").is_none());
    assert_eq!(store.submission("lost").unwrap().status, SubmissionStatus::InternalError);
}

#[test]
fn submission_bundle_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path());
    store.put_record(RecordKind::Task, "orf", &task()).unwrap();
    store.create_submission("s1", "alice", "orf", "python3", &files("s1"), at(5)).unwrap();
    let a = store.bundle_submission("s1").unwrap();
    let b = open(dir.path()).bundle_submission("s1").unwrap();
    assert_eq!(a, b);

    let mut archive = tar::Archive::new(a.as_slice());
    let names: Vec<String> =
        archive.entries().unwrap().map(|e| e.unwrap().path().unwrap().display().to_string()).collect();
    let mut expected: Vec<String> = SLOTS.iter().map(|s| format!("{s}.py")).collect();
    expected.push("metadata.json".into());
    assert_eq!(names, expected);
    assert!(matches!(store.bundle_submission("nope"), Err(StoreError::NotFound { .. })));
}

#[test]
fn submissions_are_never_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path());
    store.create_submission("s1", "alice", "orf", "python3", &files("a"), at(0)).unwrap();
    let again = store.create_submission("s1", "bob", "orf", "python3", &files("b"), at(1));
    assert!(matches!(again, Err(StoreError::Conflict(_))));
    assert_eq!(store.submission("s1").unwrap().user_id, "alice");
}
