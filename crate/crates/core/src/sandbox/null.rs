//! Deterministic backend that never spawns a process. A script function
//! decides the outcome of every execution from the command, stdin and the
//! files present in the sandbox.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use super::{
    relative_inside, Capabilities, ExecutionOutcome, ExitStatus, SandboxBackend, SandboxError, SandboxHandle,
    SandboxPolicy, Termination,
};

pub struct NullInvocation<'a> {
    pub argv: &'a [String],
    pub stdin: &'a [u8],
    pub files: &'a BTreeMap<String, Vec<u8>>,
    pub policy: &'a SandboxPolicy,
}

impl NullInvocation<'_> {
    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    pub fn file_text(&self, name: &str) -> String {
        self.file(name).map(|b| String::from_utf8_lossy(b).into_owned()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedRun {
    pub exit_status: ExitStatus,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub cpu_time: f64,
    pub memory: u64,
    pub termination: Termination,
    /// Files the "program" leaves behind in the working directory.
    pub writes: Vec<(String, Vec<u8>)>,
}

impl ScriptedRun {
    pub fn exit(code: i32) -> Self {
        ScriptedRun {
            exit_status: ExitStatus::Code(code),
            stdout: Vec::new(),
            stderr: Vec::new(),
            cpu_time: 0.01,
            memory: 1024 * 1024,
            termination: Termination::Exited,
            writes: Vec::new(),
        }
    }

    pub fn ok(stdout: impl Into<Vec<u8>>) -> Self {
        ScriptedRun::exit(0).with_stdout(stdout)
    }

    /// A run stopped by the sandbox. Measured usage is set to the limit
    /// that was hit so the outcome stays consistent with the policy.
    pub fn limit(termination: Termination) -> Self {
        ScriptedRun { exit_status: ExitStatus::Signal(9), termination, ..ScriptedRun::exit(0) }
    }

    pub fn with_stdout(mut self, stdout: impl Into<Vec<u8>>) -> Self {
        self.stdout = stdout.into();
        self
    }

    pub fn with_stderr(mut self, stderr: impl Into<Vec<u8>>) -> Self {
        self.stderr = stderr.into();
        self
    }

    pub fn with_write(mut self, path: impl Into<String>, data: impl Into<Vec<u8>>) -> Self {
        self.writes.push((path.into(), data.into()));
        self
    }
}

type Script = dyn Fn(&NullInvocation<'_>) -> ScriptedRun + Send + Sync;

#[derive(Clone)]
pub struct NullBackend {
    script: Arc<Script>,
    known_bundles: Option<HashSet<String>>,
    delay: Duration,
}

impl fmt::Debug for NullBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NullBackend").field("known_bundles", &self.known_bundles).field("delay", &self.delay).finish()
    }
}

impl Default for NullBackend {
    fn default() -> Self {
        NullBackend::new(|_| ScriptedRun::exit(0))
    }
}

impl NullBackend {
    pub fn new<F>(script: F) -> Self
    where
        F: Fn(&NullInvocation<'_>) -> ScriptedRun + Send + Sync + 'static,
    {
        NullBackend { script: Arc::new(script), known_bundles: None, delay: Duration::ZERO }
    }

    /// Restricts resolvable bundles; by default every bundle id resolves.
    pub fn with_bundles<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.known_bundles = Some(ids.into_iter().map(Into::into).collect());
        self
    }

    /// Sleeps this long in every execution, to model equal-cost jobs.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

impl SandboxBackend for NullBackend {
    fn name(&self) -> &'static str {
        "null"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_network_isolation: true, supports_memory_limit: true, supports_mounts: true }
    }

    fn prepare(&self, policy: &SandboxPolicy) -> Result<Box<dyn SandboxHandle>, SandboxError> {
        let problems = policy.violations();
        if !problems.is_empty() {
            return Err(SandboxError::InvalidPolicy(problems.join("; ")));
        }
        if let Some(known) = &self.known_bundles {
            if let Some(missing) = policy.dependencies.iter().find(|d| !known.contains(*d)) {
                return Err(SandboxError::UnknownBundle(missing.clone()));
            }
        }
        for m in &policy.mounts {
            if !m.host_path.exists() {
                return Err(SandboxError::MissingMount(m.host_path.clone()));
            }
        }
        Ok(Box::new(NullHandle {
            backend: self.clone(),
            policy: policy.clone(),
            files: BTreeMap::new(),
            torn_down: false,
        }))
    }
}

struct NullHandle {
    backend: NullBackend,
    policy: SandboxPolicy,
    files: BTreeMap<String, Vec<u8>>,
    torn_down: bool,
}

fn key(path: &str) -> Result<String, SandboxError> {
    relative_inside(path)
        .map(|p| p.to_string_lossy().into_owned())
        .ok_or_else(|| SandboxError::InvalidPath(path.into()))
}

impl SandboxHandle for NullHandle {
    fn write_file(&mut self, path: &str, data: &[u8], _executable: bool) -> Result<(), SandboxError> {
        if self.torn_down {
            return Err(SandboxError::TornDown);
        }
        self.files.insert(key(path)?, data.to_vec());
        Ok(())
    }

    fn read_file(&self, path: &str) -> Result<Option<Vec<u8>>, SandboxError> {
        Ok(self.files.get(&key(path)?).cloned())
    }

    fn files(&self) -> Result<Vec<(String, Vec<u8>)>, SandboxError> {
        Ok(self.files.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
    }

    fn execute(&mut self, argv: &[String], stdin: Option<&[u8]>) -> ExecutionOutcome {
        if self.torn_down {
            return ExecutionOutcome::sandbox_failure("sandbox handle already torn down");
        }
        if !self.backend.delay.is_zero() {
            std::thread::sleep(self.backend.delay);
        }
        let run = (self.backend.script)(&NullInvocation {
            argv,
            stdin: stdin.unwrap_or_default(),
            files: &self.files,
            policy: &self.policy,
        });
        for (path, data) in &run.writes {
            if let Ok(k) = key(path) {
                self.files.insert(k, data.clone());
            }
        }
        let limit = self.policy.max_output as usize;
        let mut termination = run.termination;
        let (mut cpu, mut memory) = (run.cpu_time, run.memory);
        match termination {
            Termination::CpuLimit => cpu = cpu.max(self.policy.cpu_time_limit),
            Termination::MemoryLimit => memory = memory.max(self.policy.memory_limit),
            _ => {}
        }
        if termination == Termination::Exited && (run.stdout.len() > limit || run.stderr.len() > limit) {
            termination = Termination::OutputLimit;
        }
        let wall = match termination {
            Termination::WallLimit => self.policy.wall_time_limit(),
            _ => cpu,
        };
        ExecutionOutcome {
            exit_status: run.exit_status,
            stdout: run.stdout[..run.stdout.len().min(limit)].to_vec(),
            stderr: run.stderr[..run.stderr.len().min(limit)].to_vec(),
            cpu_time_used: cpu,
            wall_time_used: wall,
            memory_peak: memory,
            termination,
            failure: (termination == Termination::SandboxFailure).then(|| "scripted sandbox failure".to_string()),
        }
    }

    fn teardown(&mut self) {
        self.torn_down = true;
        self.files.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_outcomes_are_deterministic() {
        let backend = NullBackend::new(|inv| {
            if inv.file_text("main.py").contains("boom") {
                ScriptedRun::exit(1).with_stderr("Traceback: boom")
            } else {
                ScriptedRun::ok(inv.stdin.to_vec())
            }
        });
        let mut h = backend.prepare(&SandboxPolicy::default()).unwrap();
        h.write_file("main.py", b"print(input())", false).unwrap();
        let a = h.execute(&["python3".into(), "main.py".into()], Some(b"hi"));
        let b = h.execute(&["python3".into(), "main.py".into()], Some(b"hi"));
        assert_eq!(a, b);
        assert_eq!(a.stdout, b"hi");
        h.write_file("main.py", b"boom", false).unwrap();
        let c = h.execute(&["python3".into()], None);
        assert_eq!(c.exit_status, ExitStatus::Code(1));
        h.teardown();
        h.teardown();
        assert_eq!(h.execute(&["x".into()], None).termination, Termination::SandboxFailure);
    }

    #[test]
    fn unknown_bundle_fails_prepare() {
        let backend = NullBackend::default().with_bundles(["numerics-v1"]);
        let policy = SandboxPolicy { dependencies: vec!["other".into()], ..Default::default() };
        assert!(matches!(backend.prepare(&policy), Err(SandboxError::UnknownBundle(_))));
    }

    #[test]
    fn output_truncated_to_policy() {
        let backend = NullBackend::new(|_| ScriptedRun::ok(vec![b'x'; 100]));
        let policy = SandboxPolicy { max_output: 10, ..Default::default() };
        let mut h = backend.prepare(&policy).unwrap();
        let out = h.execute(&["x".into()], None);
        assert_eq!(out.stdout.len(), 10);
        assert_eq!(out.termination, Termination::OutputLimit);
    }
}
