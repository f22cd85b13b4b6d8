//! Domain types shared across the platform.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::sandbox::SandboxPolicy;
use crate::store::BlobRef;

pub type TaskId = String;
pub type SubmissionId = String;
pub type UserId = String;

/// Relative weight of a test case. Stored as an exact positive rational so
/// scores never depend on float rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Weight(Ratio<u64>);

impl Weight {
    pub fn new(numer: u64, denom: u64) -> Option<Self> {
        if denom == 0 {
            return None;
        }
        Some(Weight(Ratio::new(numer, denom)))
    }

    pub fn integer(n: u64) -> Self {
        Weight(Ratio::from_integer(n))
    }

    pub fn ratio(&self) -> Ratio<u64> {
        self.0
    }

    pub fn is_positive(&self) -> bool {
        *self.0.numer() > 0
    }
}

impl Default for Weight {
    fn default() -> Self {
        Weight::integer(1)
    }
}

impl fmt::Display for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid weight {0:?}: expected an integer, a fraction like 2/3, or a decimal like 0.25")]
pub struct WeightParseError(pub String);

impl FromStr for Weight {
    type Err = WeightParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || WeightParseError(s.to_string());
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n: u64 = n.trim().parse().map_err(|_| err())?;
            let d: u64 = d.trim().parse().map_err(|_| err())?;
            return Weight::new(n, d).ok_or_else(err);
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.is_empty() || frac.len() > 18 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(err());
            }
            let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| err())? };
            let denom = 10u64.pow(frac.len() as u32);
            let frac: u64 = frac.parse().map_err(|_| err())?;
            let numer = int.checked_mul(denom).and_then(|v| v.checked_add(frac)).ok_or_else(err)?;
            return Weight::new(numer, denom).ok_or_else(err);
        }
        s.parse::<u64>().map(Weight::integer).map_err(|_| err())
    }
}

impl Serialize for Weight {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Weight {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(Weight::integer(n)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackVisibility {
    #[default]
    Full,
    VerdictOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdin_ref: Option<BlobRef>,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_ref: Option<BlobRef>,
    #[serde(default)]
    pub weight: Weight,
    #[serde(default)]
    pub feedback_visibility: FeedbackVisibility,
}

/// Which comparison decides a test case. Each variant carries exactly the
/// parameters that apply to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckerKind {
    Exact,
    Token,
    NumericToken { numeric_epsilon: f64 },
    Custom { custom_checker_ref: BlobRef },
}

impl CheckerKind {
    pub fn is_comparison(&self) -> bool {
        !matches!(self, CheckerKind::Custom { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            CheckerKind::Exact => "exact",
            CheckerKind::Token => "token",
            CheckerKind::NumericToken { .. } => "numeric_token",
            CheckerKind::Custom { .. } => "custom",
        }
    }
}

pub const DEFAULT_CHECKER_TIME_LIMIT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckerPolicy {
    #[serde(flatten)]
    pub kind: CheckerKind,
    /// Seconds a custom checker may run.
    pub checker_time_limit: f64,
}

impl Default for CheckerPolicy {
    fn default() -> Self {
        CheckerPolicy { kind: CheckerKind::Token, checker_time_limit: DEFAULT_CHECKER_TIME_LIMIT }
    }
}

impl CheckerPolicy {
    pub fn with_kind(kind: CheckerKind) -> Self {
        CheckerPolicy { kind, ..Default::default() }
    }
}

/// An argv template. Tokens may contain `{slot}` placeholders which expand to
/// the file name the slot is stored under in the sandbox.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommandTemplate(pub Vec<String>);

impl CommandTemplate {
    pub fn new<I, S>(parts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CommandTemplate(parts.into_iter().map(Into::into).collect())
    }

    /// Names referenced by `{name}` placeholders, in order of appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out = Vec::new();
        for part in &self.0 {
            let mut rest = part.as_str();
            while let Some(start) = rest.find('{') {
                let after = &rest[start + 1..];
                match after.find('}') {
                    Some(end) => {
                        out.push(after[..end].to_string());
                        rest = &after[end + 1..];
                    }
                    None => break,
                }
            }
        }
        out
    }

    pub fn instantiate(&self, file_names: &BTreeMap<String, String>) -> Vec<String> {
        self.0
            .iter()
            .map(|part| {
                let mut s = part.clone();
                for (slot, file) in file_names {
                    s = s.replace(&format!("{{{slot}}}"), file);
                }
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageProfile {
    pub profile_id: String,
    pub display_name: String,
    /// Appended to each slot name to form the file name in the sandbox.
    #[serde(default)]
    pub file_extension: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compile_command: Option<CommandTemplate>,
    pub run_command: CommandTemplate,
}

impl LanguageProfile {
    pub fn file_name(&self, slot: &str) -> String {
        format!("{slot}{}", self.file_extension)
    }

    pub fn slot_file_names<'a>(&self, slots: impl IntoIterator<Item = &'a String>) -> BTreeMap<String, String> {
        slots.into_iter().map(|s| (s.clone(), self.file_name(s))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statement_ref: Option<String>,
    pub file_slots: Vec<String>,
    pub languages: Vec<LanguageProfile>,
    pub test_cases: Vec<TestCase>,
    #[serde(default)]
    pub checker: CheckerPolicy,
    #[serde(default)]
    pub sandbox: SandboxPolicy,
    pub max_score: u32,
    #[serde(default)]
    pub unlock_day: u32,
    /// Worker pool label; `None` means any worker may evaluate this task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<String>,
}

impl TaskSpec {
    pub fn language(&self, profile_id: &str) -> Option<&LanguageProfile> {
        self.languages.iter().find(|l| l.profile_id == profile_id)
    }

    pub fn case(&self, case_id: &str) -> Option<&TestCase> {
        self.test_cases.iter().find(|c| c.case_id == case_id)
    }
}

/// Part of a task a validation problem refers to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TaskField {
    TaskId,
    Title,
    Slots,
    Languages,
    Language(usize),
    Cases,
    Case(usize),
    Checker,
    Sandbox,
    MaxScore,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: TaskField,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ValidationErrors(pub Vec<Violation>);

impl ValidationErrors {
    pub fn messages(&self) -> Vec<String> {
        self.0.iter().map(|v| v.message.clone()).collect()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.0.iter().any(|v| v.message.contains(needle))
    }
}

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            f.write_str(&v.message)?;
        }
        Ok(())
    }
}

/// A task that passed [`validate_task`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedTask(TaskSpec);

impl ValidatedTask {
    pub fn spec(&self) -> &TaskSpec {
        &self.0
    }

    pub fn into_inner(self) -> TaskSpec {
        self.0
    }
}

impl std::ops::Deref for ValidatedTask {
    type Target = TaskSpec;
    fn deref(&self) -> &TaskSpec {
        &self.0
    }
}

/// Checks every structural invariant of a task. All violations are
/// collected; nothing here panics on malformed input.
pub fn validate_task(spec: TaskSpec) -> Result<ValidatedTask, ValidationErrors> {
    let mut errs = Vec::new();
    let mut push = |field: TaskField, message: String| errs.push(Violation { field, message });

    if spec.task_id.trim().is_empty() {
        push(TaskField::TaskId, "task_id empty".into());
    } else if !spec.task_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        push(TaskField::TaskId, format!("task_id {:?} may only contain [A-Za-z0-9_-]", spec.task_id));
    }

    if spec.file_slots.is_empty() {
        push(TaskField::Slots, "file_slots empty".into());
    }
    let mut seen = HashSet::new();
    for slot in &spec.file_slots {
        if !seen.insert(slot.as_str()) {
            push(TaskField::Slots, format!("duplicate slot {slot:?}"));
        }
        if slot.is_empty()
            || !slot.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
            || slot.starts_with('.')
        {
            push(
                TaskField::Slots,
                format!("slot name {slot:?} may only contain [A-Za-z0-9_.-] and must not start with '.'"),
            );
        }
    }

    if spec.languages.is_empty() {
        push(TaskField::Languages, "languages empty".into());
    }
    let mut lang_ids = HashSet::new();
    for (i, lang) in spec.languages.iter().enumerate() {
        if !lang_ids.insert(lang.profile_id.as_str()) {
            push(TaskField::Language(i), format!("duplicate language {:?}", lang.profile_id));
        }
        if lang.run_command.0.is_empty() {
            push(TaskField::Language(i), format!("language {:?}: run_command empty", lang.profile_id));
        }
        let mut templates = vec![("run_command", &lang.run_command)];
        if let Some(c) = &lang.compile_command {
            if c.0.is_empty() {
                push(TaskField::Language(i), format!("language {:?}: compile_command empty", lang.profile_id));
            }
            templates.push(("compile_command", c));
        }
        for (what, tpl) in templates {
            for name in tpl.placeholders() {
                if !spec.file_slots.contains(&name) {
                    push(
                        TaskField::Language(i),
                        format!("language {:?}: {what} references undeclared slot {name:?}", lang.profile_id),
                    );
                }
            }
        }
    }

    if spec.test_cases.is_empty() {
        push(TaskField::Cases, "test_cases empty".into());
    }
    let mut case_ids = HashSet::new();
    let mut total = Ratio::from_integer(0u128);
    for (i, case) in spec.test_cases.iter().enumerate() {
        if case.case_id.is_empty() {
            push(TaskField::Case(i), format!("case #{}: case_id empty", i + 1));
        }
        if !case_ids.insert(case.case_id.as_str()) {
            push(TaskField::Case(i), format!("duplicate case {:?}", case.case_id));
        }
        if !case.weight.is_positive() {
            push(TaskField::Case(i), format!("case {:?}: weight must be > 0", case.case_id));
        }
        let w = case.weight.ratio();
        total += Ratio::new(*w.numer() as u128, *w.denom() as u128);
        if spec.checker.kind.is_comparison() && case.expected_ref.is_none() {
            push(
                TaskField::Case(i),
                format!("case {:?}: expected output required for {} checker", case.case_id, spec.checker.kind.name()),
            );
        }
    }
    if !spec.test_cases.is_empty() && total == Ratio::from_integer(0) {
        push(TaskField::Cases, "sum of test-case weights must be > 0".into());
    }

    if let CheckerKind::NumericToken { numeric_epsilon } = spec.checker.kind {
        if !(numeric_epsilon >= 0.0 && numeric_epsilon.is_finite()) {
            push(TaskField::Checker, format!("numeric_epsilon must be a finite value >= 0, got {numeric_epsilon}"));
        }
    }
    if !(spec.checker.checker_time_limit > 0.0 && spec.checker.checker_time_limit.is_finite()) {
        push(TaskField::Checker, "checker_time_limit must be > 0".into());
    }

    for problem in spec.sandbox.violations() {
        push(TaskField::Sandbox, problem);
    }

    if spec.max_score == 0 {
        push(TaskField::MaxScore, "max_score must be > 0".into());
    }

    if errs.is_empty() {
        Ok(ValidatedTask(spec))
    } else {
        Err(ValidationErrors(errs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmissionStatus {
    Queued,
    Compiling,
    Running,
    Evaluated,
    InternalError,
}

impl SubmissionStatus {
    fn rank(self) -> u8 {
        match self {
            SubmissionStatus::Queued => 0,
            SubmissionStatus::Compiling => 1,
            SubmissionStatus::Running => 2,
            SubmissionStatus::Evaluated | SubmissionStatus::InternalError => 3,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 3
    }

    /// Human-readable label as shown in the submissions table.
    pub fn label(self) -> &'static str {
        match self {
            SubmissionStatus::Queued => "Queued",
            SubmissionStatus::Compiling => "Compiling",
            SubmissionStatus::Running => "Running",
            SubmissionStatus::Evaluated => "Evaluated",
            SubmissionStatus::InternalError => "Internal error",
        }
    }
}

impl fmt::Display for SubmissionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("submission status cannot move from {from:?} to {to:?}")]
pub struct StatusTransitionError {
    pub from: SubmissionStatus,
    pub to: SubmissionStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub submission_id: SubmissionId,
    pub user_id: UserId,
    pub task_id: TaskId,
    pub files: BTreeMap<String, BlobRef>,
    pub language: String,
    pub submitted_at: DateTime<Utc>,
    pub status: SubmissionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results: Option<EvaluationReport>,
    /// Operator-facing reason for `internal_error`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Submission {
    /// Moves an in-progress submission forward. Requests to move to the
    /// current or an earlier in-progress status are ignored (`Ok(false)`),
    /// which happens when a retried job republishes its phases. Terminal
    /// statuses are only reachable through [`Submission::finish`].
    pub fn advance(&mut self, to: SubmissionStatus) -> Result<bool, StatusTransitionError> {
        if self.status.is_terminal() || to.is_terminal() {
            return Err(StatusTransitionError { from: self.status, to });
        }
        if to.rank() <= self.status.rank() {
            return Ok(false);
        }
        self.status = to;
        Ok(true)
    }

    pub fn finish(&mut self, report: EvaluationReport) -> Result<(), StatusTransitionError> {
        if self.status.is_terminal() {
            return Err(StatusTransitionError { from: self.status, to: SubmissionStatus::Evaluated });
        }
        self.status = SubmissionStatus::Evaluated;
        self.results = Some(report);
        Ok(())
    }

    pub fn fail(&mut self, reason: impl Into<String>) -> Result<(), StatusTransitionError> {
        if self.status.is_terminal() {
            return Err(StatusTransitionError { from: self.status, to: SubmissionStatus::InternalError });
        }
        self.status = SubmissionStatus::InternalError;
        self.failure = Some(reason.into());
        Ok(())
    }

    pub fn score(&self) -> Option<u32> {
        self.results.as_ref().map(|r| r.score)
    }

    /// Checks the record-level invariants against its task.
    pub fn check_against(&self, task: &TaskSpec) -> Result<(), String> {
        let slots: HashSet<&String> = task.file_slots.iter().collect();
        let files: HashSet<&String> = self.files.keys().collect();
        if slots != files {
            return Err("submitted files do not match the task's slots".into());
        }
        if (self.status == SubmissionStatus::Evaluated) != self.results.is_some() {
            return Err("results must be present exactly when evaluated".into());
        }
        if let Some(r) = &self.results {
            r.check_against(task)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseVerdict {
    Pass,
    WrongOutput,
    RuntimeError,
    TimeLimit,
    MemoryLimit,
    CheckerError,
}

impl CaseVerdict {
    pub fn is_pass(self) -> bool {
        self == CaseVerdict::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub verdict: CaseVerdict,
    pub message: String,
    pub weight: Weight,
    /// Seconds of CPU time.
    pub time_used: f64,
    /// Peak resident memory in bytes.
    pub memory_used: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_case: Vec<CaseResult>,
    pub score: u32,
    pub max_score: u32,
}

impl EvaluationReport {
    pub fn assemble(per_case: Vec<CaseResult>, max_score: u32) -> Self {
        let score = aggregate_score(per_case.iter().map(|c| (c.verdict, c.weight)), max_score);
        EvaluationReport { per_case, score, max_score }
    }

    pub fn recomputed_score(&self) -> u32 {
        aggregate_score(self.per_case.iter().map(|c| (c.verdict, c.weight)), self.max_score)
    }

    pub fn is_self_consistent(&self) -> bool {
        !self.per_case.is_empty() && self.score == self.recomputed_score()
    }

    pub fn has_checker_error(&self) -> bool {
        self.per_case.iter().any(|c| c.verdict == CaseVerdict::CheckerError)
    }

    pub fn check_against(&self, task: &TaskSpec) -> Result<(), String> {
        let ids: Vec<&str> = self.per_case.iter().map(|c| c.case_id.as_str()).collect();
        let expected: Vec<&str> = task.test_cases.iter().map(|c| c.case_id.as_str()).collect();
        if ids != expected {
            return Err("report does not cover every test case exactly once".into());
        }
        if self.max_score != task.max_score || !self.is_self_consistent() {
            return Err("report score is inconsistent with its cases".into());
        }
        Ok(())
    }
}

/// `floor(max_score × Σ passing weights ÷ Σ all weights)`, computed exactly.
///
/// An empty list or a zero total weight yields 0; both are rejected earlier
/// by [`validate_task`].
pub fn aggregate_score<I>(per_case: I, max_score: u32) -> u32
where
    I: IntoIterator<Item = (CaseVerdict, Weight)>,
{
    use num_bigint::BigUint;
    use num_rational::BigRational;
    use num_traits::{ToPrimitive, Zero};

    let to_big = |w: Weight| {
        let r = w.ratio();
        BigRational::new((*r.numer()).into(), (*r.denom()).into())
    };
    let mut passed = BigRational::zero();
    let mut total = BigRational::zero();
    for (verdict, weight) in per_case {
        let w = to_big(weight);
        if verdict.is_pass() {
            passed += w.clone();
        }
        total += w;
    }
    if total.is_zero() {
        return 0;
    }
    let frac = passed / total * BigRational::from_integer(max_score.into());
    let floored = frac.floor().to_integer();
    let value: BigUint = floored.to_biguint().unwrap_or_default();
    value.to_u32().unwrap_or(max_score).min(max_score)
}

/// Headline score for one user on one task: the best evaluated attempt.
pub fn best_score<'a, I>(submissions: I) -> u32
where
    I: IntoIterator<Item = &'a Submission>,
{
    submissions
        .into_iter()
        .filter(|s| s.status == SubmissionStatus::Evaluated)
        .filter_map(Submission::score)
        .max()
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::SandboxPolicy;

    fn blob(tag: &str) -> BlobRef {
        BlobRef::of(tag.as_bytes())
    }

    pub(crate) fn sample_task(slots: &[&str], cases: usize) -> TaskSpec {
        TaskSpec {
            task_id: "protein_biosynthesis".into(),
            title: "Protein biosynthesis".into(),
            statement_ref: None,
            file_slots: slots.iter().map(|s| s.to_string()).collect(),
            languages: vec![LanguageProfile {
                profile_id: "python3".into(),
                display_name: "Python 3 / CPython".into(),
                file_extension: ".py".into(),
                compile_command: None,
                run_command: CommandTemplate::new(["python3", &format!("{{{}}}", slots.first().unwrap_or(&"main"))]),
            }],
            test_cases: (0..cases)
                .map(|i| TestCase {
                    case_id: format!("{}", i + 1),
                    stdin_ref: None,
                    args: vec![],
                    expected_ref: Some(blob(&format!("out{i}"))),
                    weight: Weight::integer(1),
                    feedback_visibility: FeedbackVisibility::Full,
                })
                .collect(),
            checker: CheckerPolicy::default(),
            sandbox: SandboxPolicy::default(),
            max_score: 100,
            unlock_day: 0,
            pool: None,
        }
    }

    #[test]
    fn five_slot_task_validates() {
        let task = sample_task(&["data_io", "orf_finder", "sequences", "transcription", "translation"], 3);
        assert!(validate_task(task).is_ok());
    }

    #[test]
    fn empty_slots_rejected() {
        let mut task = sample_task(&["a"], 1);
        task.file_slots.clear();
        task.languages[0].run_command = CommandTemplate::new(["true"]);
        let errs = validate_task(task).unwrap_err();
        assert!(errs.contains("file_slots empty"), "{errs}");
    }

    #[test]
    fn duplicate_slots_rejected() {
        let task = sample_task(&["a", "a"], 1);
        let errs = validate_task(task).unwrap_err();
        assert!(errs.contains("duplicate slot"), "{errs}");
    }

    #[test]
    fn every_violation_is_reported() {
        let mut task = sample_task(&["a"], 1);
        task.max_score = 0;
        task.test_cases[0].expected_ref = None;
        task.test_cases[0].weight = Weight::integer(0);
        task.languages[0].run_command = CommandTemplate::new(["python3", "{nope}"]);
        let errs = validate_task(task).unwrap_err();
        for needle in ["max_score", "expected output required", "weight must be > 0", "undeclared slot \"nope\""] {
            assert!(errs.contains(needle), "missing {needle}: {errs}");
        }
    }

    #[test]
    fn custom_checker_does_not_need_expected() {
        let mut task = sample_task(&["a"], 2);
        task.checker.kind = CheckerKind::Custom { custom_checker_ref: blob("chk") };
        for c in &mut task.test_cases {
            c.expected_ref = None;
        }
        assert!(validate_task(task).is_ok());
    }

    #[test]
    fn negative_epsilon_rejected() {
        let mut task = sample_task(&["a"], 1);
        task.checker.kind = CheckerKind::NumericToken { numeric_epsilon: -1.0 };
        assert!(validate_task(task).unwrap_err().contains("numeric_epsilon"));
    }

    #[test]
    fn weight_parsing() {
        assert_eq!("3".parse::<Weight>().unwrap(), Weight::integer(3));
        assert_eq!("2/4".parse::<Weight>().unwrap(), Weight::new(1, 2).unwrap());
        assert_eq!("0.25".parse::<Weight>().unwrap(), Weight::new(1, 4).unwrap());
        assert!("1/0".parse::<Weight>().is_err());
        assert!("-1".parse::<Weight>().is_err());
        assert!("x".parse::<Weight>().is_err());
        let w: Weight = serde_json::from_str("\"2/3\"").unwrap();
        assert_eq!(serde_json::to_string(&w).unwrap(), "\"2/3\"");
        let w: Weight = serde_json::from_str("5").unwrap();
        assert_eq!(w, Weight::integer(5));
    }

    #[test]
    fn template_placeholders() {
        let t = CommandTemplate::new(["python3", "{main}", "--with={data_io}x"]);
        assert_eq!(t.placeholders(), vec!["main", "data_io"]);
        let names = BTreeMap::from([
            ("main".to_string(), "main.py".to_string()),
            ("data_io".to_string(), "data_io.py".to_string()),
        ]);
        assert_eq!(t.instantiate(&names), vec!["python3", "main.py", "--with=data_io.pyx"]);
    }

    fn sub(status: SubmissionStatus, score: Option<u32>) -> Submission {
        Submission {
            submission_id: "s".into(),
            user_id: "u".into(),
            task_id: "t".into(),
            files: BTreeMap::new(),
            language: "python3".into(),
            submitted_at: Utc::now(),
            status,
            results: score.map(|s| EvaluationReport { per_case: vec![], score: s, max_score: 100 }),
            failure: None,
        }
    }

    #[test]
    fn status_moves_forward_only() {
        let mut s = sub(SubmissionStatus::Queued, None);
        assert_eq!(s.advance(SubmissionStatus::Running), Ok(true));
        assert_eq!(s.advance(SubmissionStatus::Compiling), Ok(false));
        assert_eq!(s.status, SubmissionStatus::Running);
        s.fail("boom").unwrap();
        assert!(s.advance(SubmissionStatus::Running).is_err());
        assert!(s.finish(EvaluationReport { per_case: vec![], score: 0, max_score: 1 }).is_err());
        assert_eq!(s.status, SubmissionStatus::InternalError);
    }

    #[test]
    fn best_score_examples() {
        let h = [sub(SubmissionStatus::Evaluated, Some(40)), sub(SubmissionStatus::Evaluated, Some(100))];
        assert_eq!(best_score(&h), 100);
        assert_eq!(best_score(&[]), 0);
        let h: Vec<_> = [70, 70, 30].iter().map(|&s| sub(SubmissionStatus::Evaluated, Some(s))).collect();
        assert_eq!(best_score(&h), 70);
        let h = [sub(SubmissionStatus::Queued, None), sub(SubmissionStatus::InternalError, None)];
        assert_eq!(best_score(&h), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn verdict() -> impl Strategy<Value = CaseVerdict> {
            prop_oneof![
                Just(CaseVerdict::Pass),
                Just(CaseVerdict::WrongOutput),
                Just(CaseVerdict::RuntimeError),
                Just(CaseVerdict::TimeLimit),
                Just(CaseVerdict::MemoryLimit),
                Just(CaseVerdict::CheckerError),
            ]
        }

        fn weight() -> impl Strategy<Value = Weight> {
            (1u64..50, 1u64..12).prop_map(|(n, d)| Weight::new(n, d).unwrap())
        }

        fn status() -> impl Strategy<Value = SubmissionStatus> {
            prop_oneof![
                Just(SubmissionStatus::Queued),
                Just(SubmissionStatus::Compiling),
                Just(SubmissionStatus::Running),
                Just(SubmissionStatus::Evaluated),
                Just(SubmissionStatus::InternalError),
            ]
        }

        proptest! {
            #[test]
            fn monotone_in_passes(
                cases in prop::collection::vec((verdict(), weight()), 1..10),
                flip in any::<prop::sample::Index>(),
                max in 1u32..1000,
            ) {
                let before = aggregate_score(cases.iter().copied(), max);
                let mut after_cases = cases.clone();
                let i = flip.index(after_cases.len());
                after_cases[i].0 = CaseVerdict::Pass;
                prop_assert!(aggregate_score(after_cases, max) >= before);
                prop_assert!(before <= max);
            }

            #[test]
            fn extremes(weights in prop::collection::vec(weight(), 1..10), max in 1u32..1000) {
                let all_pass = weights.iter().map(|&w| (CaseVerdict::Pass, w));
                prop_assert_eq!(aggregate_score(all_pass, max), max);
                let all_fail = weights.iter().map(|&w| (CaseVerdict::WrongOutput, w));
                prop_assert_eq!(aggregate_score(all_fail, max), 0);
            }

            #[test]
            fn best_score_permutation_invariant(
                scores in prop::collection::vec(prop::option::of(0u32..=100), 0..8),
                seed in any::<u64>(),
            ) {
                use rand::{seq::SliceRandom, SeedableRng};
                let subs: Vec<_> = scores
                    .iter()
                    .map(|s| match s {
                        Some(v) => sub(SubmissionStatus::Evaluated, Some(*v)),
                        None => sub(SubmissionStatus::Queued, None),
                    })
                    .collect();
                let mut shuffled = subs.clone();
                shuffled.shuffle(&mut rand::rngs::StdRng::seed_from_u64(seed));
                prop_assert_eq!(best_score(&subs), best_score(&shuffled));
                let naive = scores.iter().flatten().copied().fold(0, u32::max);
                prop_assert_eq!(best_score(&subs), naive);
            }

            #[test]
            fn status_never_moves_backwards(events in prop::collection::vec(status(), 0..20)) {
                let mut s = sub(SubmissionStatus::Queued, None);
                let mut prev = s.status;
                for e in events {
                    let _ = match e {
                        SubmissionStatus::Evaluated => s.finish(EvaluationReport { per_case: vec![], score: 0, max_score: 1 }).map(|_| true),
                        SubmissionStatus::InternalError => s.fail("x").map(|_| true),
                        other => s.advance(other),
                    };
                    prop_assert!(s.status.rank() >= prev.rank());
                    if prev.is_terminal() {
                        prop_assert_eq!(s.status, prev);
                    }
                    prev = s.status;
                }
            }
        }
    }
}
