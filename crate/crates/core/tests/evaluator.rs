mod common;

use std::collections::BTreeMap;

use chrono::Utc;

use common::BoxRoot;
use sae_core::evaluator::{evaluate, EvaluationPlan, InfraFailure};
use sae_core::model::{
    CaseVerdict, CommandTemplate, EvaluationReport, FeedbackVisibility, LanguageProfile, SubmissionStatus, TaskSpec,
    TestCase, Weight,
};
use sae_core::sandbox::{NullBackend, SandboxBackend, SandboxPolicy, ScriptedRun, Termination};
use sae_core::store::Store;

fn python() -> LanguageProfile {
    LanguageProfile {
        profile_id: "python3".into(),
        display_name: "Python 3 / CPython".into(),
        file_extension: ".py".into(),
        compile_command: None,
        run_command: CommandTemplate::new(["python3", "{main}"]),
    }
}

fn compiled() -> LanguageProfile {
    LanguageProfile {
        profile_id: "c".into(),
        display_name: "C (gcc)".into(),
        file_extension: ".c".into(),
        compile_command: Some(CommandTemplate::new(["cc", "-o", "main.bin", "{main}"])),
        run_command: CommandTemplate::new(["./main.bin"]),
    }
}

/// Task doubling a number: case i has stdin `i` and expects `2i`.
fn doubling_task(store: &Store, cases: usize, sandbox: SandboxPolicy) -> TaskSpec {
    let test_cases = (1..=cases)
        .map(|i| TestCase {
            case_id: format!("c{i}"),
            stdin_ref: Some(store.put_blob(format!("{i}\n").as_bytes()).unwrap()),
            args: vec![],
            expected_ref: Some(store.put_blob(format!("{}\n", 2 * i).as_bytes()).unwrap()),
            weight: Weight::integer(1),
            feedback_visibility: FeedbackVisibility::Full,
        })
        .collect();
    TaskSpec {
        task_id: "double".into(),
        title: "Double it".into(),
        statement_ref: None,
        file_slots: vec!["main".into()],
        languages: vec![python(), compiled()],
        test_cases,
        checker: Default::default(),
        sandbox,
        max_score: 100,
        unlock_day: 0,
        pool: None,
    }
}

fn plan_for(store: &Store, task: &TaskSpec, language: &str, source: &str) -> EvaluationPlan {
    let id = format!("sub-{}", uuid::Uuid::now_v7().simple());
    let files = BTreeMap::from([("main".to_string(), source.as_bytes().to_vec())]);
    let sub = store.create_submission(&id, "alice", &task.task_id, language, &files, Utc::now()).unwrap();
    EvaluationPlan::new(task, &sub).unwrap()
}

fn run(
    plan: &EvaluationPlan,
    backend: &dyn SandboxBackend,
    store: &Store,
) -> (Result<EvaluationReport, InfraFailure>, Vec<SubmissionStatus>) {
    let mut phases = Vec::new();
    let r = evaluate(plan, backend, store, &mut |s| phases.push(s));
    (r, phases)
}

/// Null-backend "interpreter": the source text selects a behavior.
fn scripted() -> NullBackend {
    NullBackend::new(|inv| {
        let src = inv.file_text("main.py") + &inv.file_text("main.bin");
        let n: i64 = String::from_utf8_lossy(inv.stdin).trim().parse().unwrap_or(0);
        if src.contains("crash-on-2") && n == 2 {
            return ScriptedRun::exit(1)
                .with_stderr("Traceback (most recent call last):\nValueError: two is unlucky\n");
        }
        if src.contains("stateful") {
            // passes only if no earlier case left its marker behind
            let fresh = inv.file("marker").is_none();
            let out = if fresh { 2 * n } else { -1 };
            return ScriptedRun::ok(format!("{out}\n")).with_write("marker", b"x".to_vec());
        }
        if src.contains("loop") {
            return ScriptedRun::limit(Termination::CpuLimit);
        }
        if src.contains("sleep") {
            return ScriptedRun::limit(Termination::WallLimit);
        }
        if src.contains("hog") {
            return ScriptedRun::limit(Termination::MemoryLimit);
        }
        if src.contains("spam") {
            return ScriptedRun::ok(vec![b'y'; 4096]);
        }
        if src.contains("infra") {
            return ScriptedRun::limit(Termination::SandboxFailure);
        }
        ScriptedRun::ok(format!("{}\n", 2 * n))
    })
}

/// Compiler stand-in: "cc" leaves main.bin with the source text, or fails
/// on "syntax error".
fn scripted_with_compiler() -> NullBackend {
    let inner = scripted();
    NullBackend::new(move |inv| {
        if inv.argv.first().map(String::as_str) == Some("cc") {
            let src = inv.file_text("main.c");
            if src.contains("syntax error") {
                return ScriptedRun::exit(1).with_stderr("main.c:1:1: error: expected ';'\n");
            }
            return ScriptedRun::exit(0).with_write("main.bin", src.into_bytes());
        }
        let mut files = inv.files.clone();
        files.remove("main.c");
        let backend = inner.clone();
        let mut h = backend.prepare(inv.policy).unwrap();
        for (k, v) in &files {
            h.write_file(k, v, false).unwrap();
        }
        let out = h.execute(inv.argv, Some(inv.stdin));
        ScriptedRun {
            exit_status: out.exit_status,
            stdout: out.stdout,
            stderr: out.stderr,
            cpu_time: out.cpu_time_used,
            memory: out.memory_peak,
            termination: out.termination,
            writes: vec![],
        }
    })
}

fn verdicts(r: &EvaluationReport) -> Vec<CaseVerdict> {
    r.per_case.iter().map(|c| c.verdict).collect()
}

#[test]
fn correct_solution_scores_full_marks_without_a_compile_phase() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let task = doubling_task(&store, 4, SandboxPolicy::default());
    let plan = plan_for(&store, &task, "python3", "print(2 * int(input()))");
    let (r, phases) = run(&plan, &scripted(), &store);
    let r = r.unwrap();
    assert_eq!(verdicts(&r), vec![CaseVerdict::Pass; 4]);
    assert_eq!(r.score, 100);
    assert_eq!(phases, [SubmissionStatus::Running]);
    r.check_against(&task).unwrap();
}

#[test]
fn crash_on_case_two_scores_75_with_stderr_tail() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let task = doubling_task(&store, 4, SandboxPolicy::default());
    let plan = plan_for(&store, &task, "python3", "# crash-on-2");
    let r = run(&plan, &scripted(), &store).0.unwrap();
    use CaseVerdict::*;
    assert_eq!(verdicts(&r), [Pass, RuntimeError, Pass, Pass]);
    assert_eq!(r.score, 75);
    let msg = &r.per_case[1].message;
    assert!(msg.starts_with("exit status 1\n"), "{msg}");
    assert!(msg.contains("ValueError: two is unlucky"), "{msg}");
}

#[test]
fn identical_plans_give_byte_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let task = doubling_task(&store, 6, SandboxPolicy::default());
    for src in ["ok", "# crash-on-2", "stateful", "loop", "hog", "spam"] {
        let plan = plan_for(&store, &task, "python3", src);
        let a = serde_json::to_vec(&run(&plan, &scripted(), &store).0.unwrap()).unwrap();
        let b = serde_json::to_vec(&run(&plan, &scripted(), &store).0.unwrap()).unwrap();
        assert_eq!(a, b, "{src}");
    }
}

#[test]
fn each_case_starts_from_a_fresh_sandbox() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let task = doubling_task(&store, 3, SandboxPolicy::default());
    let plan = plan_for(&store, &task, "python3", "stateful");
    let r = run(&plan, &scripted(), &store).0.unwrap();
    assert_eq!(verdicts(&r), vec![CaseVerdict::Pass; 3]);
}

#[test]
fn limits_map_to_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let policy = SandboxPolicy { max_output: 1024, ..Default::default() };
    let task = doubling_task(&store, 2, policy);
    let cases = [
        ("loop", CaseVerdict::TimeLimit, "time limit exceeded"),
        ("sleep", CaseVerdict::TimeLimit, "wall clock"),
        ("hog", CaseVerdict::MemoryLimit, "memory limit exceeded"),
        ("spam", CaseVerdict::RuntimeError, "output limit exceeded"),
    ];
    for (src, verdict, text) in cases {
        let plan = plan_for(&store, &task, "python3", src);
        let r = run(&plan, &scripted(), &store).0.unwrap();
        assert_eq!(verdicts(&r), [verdict, verdict], "{src}");
        assert!(r.per_case[0].message.contains(text), "{src}: {}", r.per_case[0].message);
        assert_eq!(r.score, 0);
    }
}

#[test]
fn sandbox_failure_is_an_infrastructure_error() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let task = doubling_task(&store, 2, SandboxPolicy::default());
    let plan = plan_for(&store, &task, "python3", "infra");
    assert!(run(&plan, &scripted(), &store).0.unwrap_err().reason.contains("sandbox failure"));

    let needs_bundle =
        doubling_task(&store, 2, SandboxPolicy { dependencies: vec!["numerics-v1".into()], ..Default::default() });
    let plan = plan_for(&store, &needs_bundle, "python3", "ok");
    let backend = scripted().with_bundles(Vec::<String>::new());
    let err = run(&plan, &backend, &store).0.unwrap_err();
    assert!(err.reason.contains("numerics-v1"), "{}", err.reason);
}

#[test]
fn compiled_language_publishes_both_phases() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let task = doubling_task(&store, 4, SandboxPolicy::default());
    let plan = plan_for(&store, &task, "c", "int main() { /* crash-on-2 */ }");
    let (r, phases) = run(&plan, &scripted_with_compiler(), &store);
    assert_eq!(phases, [SubmissionStatus::Compiling, SubmissionStatus::Running]);
    assert_eq!(r.unwrap().score, 75);
}

#[test]
fn compile_failure_fails_every_case_with_compiler_output() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let task = doubling_task(&store, 3, SandboxPolicy::default());
    let plan = plan_for(&store, &task, "c", "syntax error");
    let r = run(&plan, &scripted_with_compiler(), &store).0.unwrap();
    assert_eq!(verdicts(&r), vec![CaseVerdict::RuntimeError; 3]);
    for c in &r.per_case {
        assert!(c.message.starts_with("compilation failed (exit status 1)"), "{}", c.message);
        assert!(c.message.contains("expected ';'"));
    }
    assert_eq!(r.score, 0);
}

#[test]
fn weights_and_args_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let mut task = doubling_task(&store, 3, SandboxPolicy::default());
    task.test_cases[0].weight = Weight::integer(2);
    task.test_cases[2].args = vec!["--fail".into()];
    let backend = NullBackend::new(|inv| {
        if inv.argv.last().map(String::as_str) == Some("--fail") {
            return ScriptedRun::ok("nope\n");
        }
        let n: i64 = String::from_utf8_lossy(inv.stdin).trim().parse().unwrap();
        ScriptedRun::ok(format!("{}\n", 2 * n))
    });
    let plan = plan_for(&store, &task, "python3", "");
    let r = run(&plan, &backend, &store).0.unwrap();
    use CaseVerdict::*;
    assert_eq!(verdicts(&r), [Pass, Pass, WrongOutput]);
    // floor(100 * 3 / 4)
    assert_eq!(r.score, 75);
    assert_eq!(r.per_case[2].message, "token 1: expected \"6\", got \"nope\"");
}

// Real processes.

#[test]
fn process_backend_python_solution() {
    let root = BoxRoot::new();
    let backend = common::backend(&root);
    let store = Store::open(root.0.join("store")).unwrap();
    let task = doubling_task(&store, 4, common::policy(2.0));
    let source = "n = int(input())\nif n == 2:\n    raise ZeroDivisionError('no twos here')\nprint(2 * n)\n";
    let plan = plan_for(&store, &task, "python3", source);
    let (r, phases) = run(&plan, &backend, &store);
    let r = r.unwrap();
    use CaseVerdict::*;
    assert_eq!(verdicts(&r), [Pass, RuntimeError, Pass, Pass]);
    assert_eq!(r.score, 75);
    assert!(r.per_case[1].message.contains("ZeroDivisionError: no twos here"), "{}", r.per_case[1].message);
    assert_eq!(phases, [SubmissionStatus::Running]);

    let stateful = "import os\nn = int(input())\nprint(-1 if os.path.exists('marker') else 2 * n)\nopen('marker', 'w').write('x')\n";
    let plan = plan_for(&store, &task, "python3", stateful);
    assert_eq!(run(&plan, &backend, &store).0.unwrap().score, 100);
}
