//! Worker-side pipeline: compile once, run every case in its own sandbox,
//! check the output and assemble the report.

use std::collections::BTreeMap;

use tracing::debug;

use crate::checker::{compare_output, run_custom_checker, CheckOutcome, Verdict};
use crate::model::{
    CaseResult, CaseVerdict, CheckerKind, CheckerPolicy, EvaluationReport, LanguageProfile, Submission,
    SubmissionStatus, TaskSpec, TestCase,
};
use crate::sandbox::{ExecutionOutcome, ExitStatus, SandboxBackend, SandboxHandle, SandboxPolicy, Termination};
use crate::store::{BlobRef, Store};

/// Default size of the stderr tail shown to students.
pub const STDERR_EXCERPT: usize = 2 * 1024;

/// Everything needed to evaluate one submission, taken from the task and
/// the submission records.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationPlan {
    pub submission_id: String,
    pub language: LanguageProfile,
    pub sandbox: SandboxPolicy,
    pub cases: Vec<TestCase>,
    pub checker: CheckerPolicy,
    pub max_score: u32,
    /// Slot name to submitted file.
    pub files: BTreeMap<String, BlobRef>,
}

/// The platform failed, not the submission. Takes the retry path.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{reason}")]
pub struct InfraFailure {
    pub reason: String,
}

impl InfraFailure {
    pub fn new(reason: impl Into<String>) -> Self {
        InfraFailure { reason: reason.into() }
    }
}

impl EvaluationPlan {
    pub fn new(task: &TaskSpec, submission: &Submission) -> Result<Self, InfraFailure> {
        let language = task.language(&submission.language).ok_or_else(|| {
            InfraFailure::new(format!("task {} has no language {:?}", task.task_id, submission.language))
        })?;
        submission.check_against(task).map_err(InfraFailure::new)?;
        Ok(EvaluationPlan {
            submission_id: submission.submission_id.clone(),
            language: language.clone(),
            sandbox: task.sandbox.clone(),
            cases: task.test_cases.clone(),
            checker: task.checker.clone(),
            max_score: task.max_score,
            files: submission.files.clone(),
        })
    }
}

/// Last `limit` bytes of `stderr` as text. Leading continuation bytes of a
/// split character are dropped.
pub fn excerpt_stderr(stderr: &[u8], limit: usize) -> String {
    let mut start = stderr.len().saturating_sub(limit);
    let mut skipped = 0;
    while start < stderr.len() && skipped < 3 && (stderr[start] & 0xC0) == 0x80 {
        start += 1;
        skipped += 1;
    }
    String::from_utf8_lossy(&stderr[start..]).into_owned()
}

fn blob(store: &Store, r: &BlobRef, what: &str) -> Result<Vec<u8>, InfraFailure> {
    store.get_blob(r).map_err(|e| InfraFailure::new(format!("cannot load {what}: {e}")))
}

fn prepare(backend: &dyn SandboxBackend, policy: &SandboxPolicy) -> Result<Box<dyn SandboxHandle>, InfraFailure> {
    backend.prepare(policy).map_err(|e| InfraFailure::new(format!("sandbox setup failed: {e}")))
}

/// Runs the plan. `publish` is told about the `compiling` and `running`
/// phases as they start; the compiling phase is skipped when the language
/// has no compile step.
pub fn evaluate(
    plan: &EvaluationPlan,
    backend: &dyn SandboxBackend,
    store: &Store,
    publish: &mut dyn FnMut(SubmissionStatus),
) -> Result<EvaluationReport, InfraFailure> {
    let names = plan.language.slot_file_names(plan.files.keys());
    let mut sources = Vec::new();
    for (slot, r) in &plan.files {
        sources.push((names[slot].clone(), blob(store, r, &format!("file for slot {slot}"))?, false));
    }

    let staged = match &plan.language.compile_command {
        None => sources,
        Some(cmd) => {
            publish(SubmissionStatus::Compiling);
            match compile(backend, &plan.sandbox, &sources, &cmd.instantiate(&names))? {
                Ok(artifacts) => artifacts,
                Err(message) => {
                    publish(SubmissionStatus::Running);
                    let per_case = plan
                        .cases
                        .iter()
                        .map(|c| CaseResult {
                            case_id: c.case_id.clone(),
                            verdict: CaseVerdict::RuntimeError,
                            message: message.clone(),
                            weight: c.weight,
                            time_used: 0.0,
                            memory_used: 0,
                        })
                        .collect();
                    return Ok(EvaluationReport::assemble(per_case, plan.max_score));
                }
            }
        }
    };
    publish(SubmissionStatus::Running);

    let checker_program = match &plan.checker.kind {
        CheckerKind::Custom { custom_checker_ref } => Some(blob(store, custom_checker_ref, "custom checker")?),
        _ => None,
    };
    let run = plan.language.run_command.instantiate(&names);
    let mut per_case = Vec::with_capacity(plan.cases.len());
    for case in &plan.cases {
        per_case.push(run_case(plan, backend, store, &staged, &run, case, checker_program.as_deref())?);
    }
    Ok(EvaluationReport::assemble(per_case, plan.max_score))
}

type Staged = Vec<(String, Vec<u8>, bool)>;

/// Outer error: infrastructure. Inner error: compiler diagnostics.
fn compile(
    backend: &dyn SandboxBackend,
    policy: &SandboxPolicy,
    sources: &Staged,
    argv: &[String],
) -> Result<Result<Staged, String>, InfraFailure> {
    let mut handle = prepare(backend, policy)?;
    for (name, data, exec) in sources {
        handle.write_file(name, data, *exec).map_err(|e| InfraFailure::new(format!("staging sources: {e}")))?;
    }
    let outcome = handle.execute(argv, None);
    let result = match outcome.termination {
        Termination::SandboxFailure => {
            handle.teardown();
            return Err(InfraFailure::new(format!(
                "sandbox failure while compiling: {}",
                outcome.failure.as_deref().unwrap_or("unknown")
            )));
        }
        Termination::Exited if outcome.exit_status.success() => {
            let files = handle.files().map_err(|e| InfraFailure::new(format!("collecting artifacts: {e}")))?;
            Ok(files.into_iter().map(|(name, data)| (name, data, true)).collect())
        }
        Termination::CpuLimit | Termination::WallLimit => Err("compilation failed: time limit exceeded".to_string()),
        Termination::MemoryLimit => Err("compilation failed: memory limit exceeded".to_string()),
        _ => {
            let mut output = outcome.stdout.clone();
            output.extend_from_slice(&outcome.stderr);
            Err(format!(
                "compilation failed ({})\n{}",
                describe_exit(outcome.exit_status),
                excerpt_stderr(&output, STDERR_EXCERPT)
            ))
        }
    };
    handle.teardown();
    Ok(result)
}

fn describe_exit(status: ExitStatus) -> String {
    match status {
        ExitStatus::Code(c) => format!("exit status {c}"),
        ExitStatus::Signal(s) => format!("killed by signal {s}"),
        ExitStatus::Unknown => "unknown exit status".into(),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_case(
    plan: &EvaluationPlan,
    backend: &dyn SandboxBackend,
    store: &Store,
    staged: &Staged,
    run: &[String],
    case: &TestCase,
    checker_program: Option<&[u8]>,
) -> Result<CaseResult, InfraFailure> {
    let stdin = match &case.stdin_ref {
        Some(r) => blob(store, r, &format!("stdin of case {}", case.case_id))?,
        None => Vec::new(),
    };
    let mut handle = prepare(backend, &plan.sandbox)?;
    for (name, data, exec) in staged {
        handle.write_file(name, data, *exec).map_err(|e| InfraFailure::new(format!("staging files: {e}")))?;
    }
    let mut argv = run.to_vec();
    argv.extend(case.args.iter().cloned());
    let outcome = handle.execute(&argv, Some(&stdin));
    handle.teardown();
    debug!(submission = %plan.submission_id, case = %case.case_id, termination = ?outcome.termination, "case finished");

    let (verdict, message) = match classify(&outcome, &plan.sandbox) {
        Classified::Infra(reason) => return Err(InfraFailure::new(reason)),
        Classified::Verdict(v, m) => (v, m),
        Classified::Check => {
            let expected = match &case.expected_ref {
                Some(r) => blob(store, r, &format!("expected output of case {}", case.case_id))?,
                None => Vec::new(),
            };
            let verdict = match checker_program {
                Some(program) => run_custom_checker(
                    backend,
                    program,
                    &stdin,
                    &expected,
                    &outcome.stdout,
                    &plan.checker,
                    &plan.sandbox,
                ),
                None => compare_output(&expected, &outcome.stdout, &plan.checker),
            };
            checker_verdict(verdict)
        }
    };
    Ok(CaseResult {
        case_id: case.case_id.clone(),
        verdict,
        message,
        weight: case.weight,
        time_used: outcome.cpu_time_used,
        memory_used: outcome.memory_peak,
    })
}

enum Classified {
    Infra(String),
    Verdict(CaseVerdict, String),
    Check,
}

fn classify(outcome: &ExecutionOutcome, policy: &SandboxPolicy) -> Classified {
    match outcome.termination {
        Termination::SandboxFailure => {
            Classified::Infra(format!("sandbox failure: {}", outcome.failure.as_deref().unwrap_or("unknown")))
        }
        Termination::CpuLimit => Classified::Verdict(
            CaseVerdict::TimeLimit,
            format!(
                "time limit exceeded ({:.2}s of CPU time, limit {}s)",
                outcome.cpu_time_used, policy.cpu_time_limit
            ),
        ),
        Termination::WallLimit => Classified::Verdict(
            CaseVerdict::TimeLimit,
            format!(
                "time limit exceeded ({:.2}s wall clock, limit {}s)",
                outcome.wall_time_used,
                policy.wall_time_limit()
            ),
        ),
        Termination::MemoryLimit => Classified::Verdict(
            CaseVerdict::MemoryLimit,
            format!("memory limit exceeded (limit {} bytes)", policy.memory_limit),
        ),
        Termination::OutputLimit => Classified::Verdict(
            CaseVerdict::RuntimeError,
            format!("output limit exceeded (limit {} bytes)", policy.max_output),
        ),
        Termination::Exited if outcome.exit_status.success() => Classified::Check,
        Termination::Exited => {
            let excerpt = excerpt_stderr(&outcome.stderr, STDERR_EXCERPT);
            let mut message = describe_exit(outcome.exit_status);
            if !excerpt.is_empty() {
                message.push('\n');
                message.push_str(&excerpt);
            }
            Classified::Verdict(CaseVerdict::RuntimeError, message)
        }
    }
}

fn checker_verdict(v: Verdict) -> (CaseVerdict, String) {
    let verdict = match v.outcome {
        CheckOutcome::Pass => CaseVerdict::Pass,
        CheckOutcome::WrongOutput => CaseVerdict::WrongOutput,
        CheckOutcome::CheckerError => CaseVerdict::CheckerError,
    };
    (verdict, v.message)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn excerpt_keeps_the_tail() {
        let mut err = b"noise\n".repeat(1000);
        err.extend_from_slice(b"ZeroDivisionError: division by zero\n");
        let e = excerpt_stderr(&err, STDERR_EXCERPT);
        assert!(e.len() <= STDERR_EXCERPT);
        assert!(e.ends_with("ZeroDivisionError: division by zero\n"));
        assert_eq!(excerpt_stderr(b"", 10), "");
        assert_eq!(excerpt_stderr(b"short", 2048), "short");
    }

    #[test]
    fn excerpt_does_not_start_inside_a_character() {
        let s = "ééé".as_bytes();
        assert_eq!(excerpt_stderr(s, 3), "é");
        assert!(!excerpt_stderr(s, 5).contains('\u{fffd}'));
    }
}
