//! Output checking: token/exact/numeric comparison and the custom checker
//! protocol.
//!
//! A custom checker is an executable invoked as
//! `checker <input> <expected> <actual>`. Exit status 0 means pass, 1 means
//! wrong output; anything else (including a timeout or a crash) is a checker
//! error. Its standard output, truncated to [`MESSAGE_LIMIT`] bytes, becomes
//! the verdict message.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{CheckerKind, CheckerPolicy};
use crate::sandbox::{ExitStatus, SandboxBackend, SandboxPolicy, Termination};

pub const MESSAGE_LIMIT: usize = 4 * 1024;

const CHECKER_FILE: &str = "checker";
const INPUT_FILE: &str = "input";
const EXPECTED_FILE: &str = "expected";
const ACTUAL_FILE: &str = "actual";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    tokens: Vec<String>,
}

impl TokenStream {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for TokenStream {
    fn from_iter<T: IntoIterator<Item = S>>(iter: T) -> Self {
        TokenStream { tokens: iter.into_iter().map(Into::into).collect() }
    }
}

/// Splits output into whitespace-separated tokens. Invalid UTF-8 is replaced
/// lossily; line endings and trailing whitespace carry no meaning.
pub fn normalize(text: &[u8]) -> TokenStream {
    String::from_utf8_lossy(text).split_whitespace().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckOutcome {
    Pass,
    WrongOutput,
    CheckerError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub outcome: CheckOutcome,
    pub message: String,
}

impl Verdict {
    pub fn pass(message: impl Into<String>) -> Self {
        Verdict { outcome: CheckOutcome::Pass, message: message.into() }
    }

    pub fn wrong(message: impl Into<String>) -> Self {
        Verdict { outcome: CheckOutcome::WrongOutput, message: non_empty(message.into(), "wrong output") }
    }

    pub fn checker_error(message: impl Into<String>) -> Self {
        Verdict { outcome: CheckOutcome::CheckerError, message: non_empty(message.into(), "checker error") }
    }

    pub fn is_pass(&self) -> bool {
        self.outcome == CheckOutcome::Pass
    }
}

fn non_empty(message: String, fallback: &str) -> String {
    if message.trim().is_empty() {
        fallback.to_string()
    } else {
        message
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.outcome, self.message)
    }
}

/// Strict decimal syntax: optional sign, digits with optional fraction,
/// optional exponent. `inf`, `nan` and hex floats are plain strings.
fn parse_decimal(token: &str) -> Option<f64> {
    let b = token.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        digits += i - frac_start;
    }
    if digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return None;
        }
    }
    if i != b.len() {
        return None;
    }
    token.parse().ok()
}

fn tokens_match(expected: &str, actual: &str, epsilon: Option<f64>) -> bool {
    if let Some(eps) = epsilon {
        if let (Some(a), Some(b)) = (parse_decimal(expected), parse_decimal(actual)) {
            if (a - b).abs() <= eps {
                return true;
            }
        }
    }
    expected == actual
}

fn show(token: Option<&String>) -> String {
    match token {
        Some(t) => format!("{:?}", truncate_chars(t, 64)),
        None => "end of output".to_string(),
    }
}

fn truncate_chars(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        s.to_string()
    } else {
        let mut t: String = s.chars().take(max).collect();
        t.push('…');
        t
    }
}

/// Token-level comparison under `token` or `numeric_token` semantics.
pub fn compare(expected: &TokenStream, actual: &TokenStream, policy: &CheckerPolicy) -> Verdict {
    let epsilon = match policy.kind {
        CheckerKind::Token | CheckerKind::Exact => None,
        CheckerKind::NumericToken { numeric_epsilon } => Some(numeric_epsilon),
        CheckerKind::Custom { .. } => {
            return Verdict::checker_error("custom checker policy passed to token comparison")
        }
    };
    let n = expected.len().max(actual.len());
    for i in 0..n {
        let e = expected.tokens.get(i);
        let a = actual.tokens.get(i);
        let same = match (e, a) {
            (Some(e), Some(a)) => tokens_match(e, a, epsilon),
            _ => false,
        };
        if !same {
            return Verdict::wrong(format!("token {}: expected {}, got {}", i + 1, show(e), show(a)));
        }
    }
    Verdict::pass("")
}

/// Compares raw output against the expected file according to `policy`.
/// `exact` compares bytes; the token kinds normalize both sides first.
pub fn compare_output(expected: &[u8], actual: &[u8], policy: &CheckerPolicy) -> Verdict {
    match policy.kind {
        CheckerKind::Exact => compare_exact(expected, actual),
        CheckerKind::Custom { .. } => Verdict::checker_error("custom checker policy passed to output comparison"),
        _ => compare(&normalize(expected), &normalize(actual), policy),
    }
}

fn compare_exact(expected: &[u8], actual: &[u8]) -> Verdict {
    if expected == actual {
        return Verdict::pass("");
    }
    let offset = expected.iter().zip(actual).take_while(|(a, b)| a == b).count();
    let line = expected[..offset].iter().filter(|&&b| b == b'\n').count() + 1;
    let line_of = |bytes: &[u8]| -> Option<String> {
        let start = bytes[..offset.min(bytes.len())].iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        if start >= bytes.len() && offset >= bytes.len() && start > 0 || bytes.is_empty() {
            return None;
        }
        let end = bytes[start..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |p| start + p);
        Some(truncate_chars(&String::from_utf8_lossy(&bytes[start..end]), 64))
    };
    let fmt = |l: Option<String>| l.map_or("end of output".to_string(), |s| format!("{s:?}"));
    Verdict::wrong(format!(
        "line {line} (byte {}): expected {}, got {}",
        offset + 1,
        fmt(line_of(expected)),
        fmt(line_of(actual))
    ))
}

/// Keeps at most `limit` bytes of `bytes` as text, cutting on a character
/// boundary.
pub fn truncate_message(bytes: &[u8], limit: usize) -> String {
    let text = String::from_utf8_lossy(bytes);
    if text.len() <= limit {
        return text.into_owned();
    }
    let mut end = limit;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    text[..end].to_string()
}

/// Runs a teacher-supplied checker in a fresh sandbox. Network access is
/// always disabled and both CPU and wall time are capped by
/// `policy.checker_time_limit`.
pub fn run_custom_checker(
    backend: &dyn SandboxBackend,
    checker: &[u8],
    input: &[u8],
    expected: &[u8],
    actual: &[u8],
    policy: &CheckerPolicy,
    sandbox: &SandboxPolicy,
) -> Verdict {
    let mut checker_policy = sandbox.clone();
    checker_policy.network_allowed = false;
    checker_policy.cpu_time_limit = policy.checker_time_limit;
    checker_policy.wall_time_limit = Some(policy.checker_time_limit);

    let mut handle = match backend.prepare(&checker_policy) {
        Ok(h) => h,
        Err(e) => return Verdict::checker_error(format!("checker sandbox failed: {e}")),
    };
    let staged = [
        (CHECKER_FILE, checker, true),
        (INPUT_FILE, input, false),
        (EXPECTED_FILE, expected, false),
        (ACTUAL_FILE, actual, false),
    ];
    for (name, data, exec) in staged {
        if let Err(e) = handle.write_file(name, data, exec) {
            handle.teardown();
            return Verdict::checker_error(format!("checker sandbox failed: {e}"));
        }
    }
    let argv: Vec<String> =
        [format!("./{CHECKER_FILE}"), INPUT_FILE.into(), EXPECTED_FILE.into(), ACTUAL_FILE.into()].into();
    let outcome = handle.execute(&argv, None);
    handle.teardown();

    let message = truncate_message(&outcome.stdout, MESSAGE_LIMIT);
    match outcome.termination {
        Termination::Exited => match outcome.exit_status {
            ExitStatus::Code(0) => Verdict::pass(message),
            ExitStatus::Code(1) => Verdict::wrong(message),
            ExitStatus::Code(c) => Verdict::checker_error(format!("checker exited with status {c}: {message}")),
            ExitStatus::Signal(s) => Verdict::checker_error(format!("checker killed by signal {s}")),
            ExitStatus::Unknown => Verdict::checker_error("checker ended without an exit status"),
        },
        Termination::CpuLimit | Termination::WallLimit => Verdict::checker_error("checker timed out"),
        Termination::MemoryLimit => Verdict::checker_error("checker exceeded the memory limit"),
        Termination::OutputLimit => Verdict::checker_error("checker exceeded the output limit"),
        Termination::SandboxFailure => Verdict::checker_error(format!(
            "checker could not be run: {}",
            outcome.failure.as_deref().unwrap_or("sandbox failure")
        )),
    }
}
