//! Isolated execution of untrusted programs.
//!
//! A [`SandboxBackend`] turns a [`SandboxPolicy`] into a [`SandboxHandle`]:
//! a private working directory with the policy's mounts and dependency
//! bundles staged. Commands executed through the handle run under the
//! policy's limits; limit breaches come back as a [`Termination`], never as
//! an error.
//!
//! Two backends ship with the crate: [`ProcessBackend`] runs real processes
//! with rlimits, a watchdog, Linux namespaces and a per-sandbox uid, and
//! [`NullBackend`] replays scripted outcomes without spawning anything.

mod bundle;
mod null;
mod process;

use std::collections::HashSet;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use bundle::{pack_bundle, pack_bundle_dir, BundleManifest, BundleStore, BUNDLE_MANIFEST};
pub use null::{NullBackend, NullInvocation, ScriptedRun};
pub use process::{IsolationMode, ProcessBackend, ProcessBackendConfig};

pub const DEFAULT_CPU_TIME_LIMIT: f64 = 2.0;
pub const DEFAULT_MEMORY_LIMIT: u64 = 256 * 1024 * 1024;
pub const DEFAULT_MAX_OUTPUT: u64 = 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mount {
    pub host_path: PathBuf,
    /// Location inside the sandbox. Guest paths are rooted at the sandbox
    /// working directory: `/data` is visible to the program as `./data`.
    pub guest_path: String,
    #[serde(default = "default_true")]
    pub read_only: bool,
}

fn default_true() -> bool {
    true
}

impl Mount {
    /// The guest path as a relative path below the working directory.
    pub fn relative_guest_path(&self) -> Option<PathBuf> {
        relative_inside(&self.guest_path)
    }
}

/// Interprets `path` as rooted at the sandbox directory. Rejects `..` and
/// empty paths.
pub(crate) fn relative_inside(path: &str) -> Option<PathBuf> {
    let mut out = PathBuf::new();
    for comp in Path::new(path).components() {
        match comp {
            Component::RootDir | Component::CurDir => {}
            Component::Normal(p) => out.push(p),
            Component::ParentDir | Component::Prefix(_) => return None,
        }
    }
    if out.as_os_str().is_empty() {
        None
    } else {
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxPolicy {
    /// Seconds of CPU time.
    pub cpu_time_limit: f64,
    /// Seconds of wall-clock time; twice the CPU limit when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_limit: Option<f64>,
    /// Bytes of resident memory.
    pub memory_limit: u64,
    /// Bytes captured per output stream.
    pub max_output: u64,
    #[serde(default)]
    pub mounts: Vec<Mount>,
    #[serde(default)]
    pub network_allowed: bool,
    #[serde(default)]
    pub dependencies: Vec<String>,
}

impl Default for SandboxPolicy {
    fn default() -> Self {
        SandboxPolicy {
            cpu_time_limit: DEFAULT_CPU_TIME_LIMIT,
            wall_time_limit: None,
            memory_limit: DEFAULT_MEMORY_LIMIT,
            max_output: DEFAULT_MAX_OUTPUT,
            mounts: Vec::new(),
            network_allowed: false,
            dependencies: Vec::new(),
        }
    }
}

impl SandboxPolicy {
    pub fn wall_time_limit(&self) -> f64 {
        self.wall_time_limit.unwrap_or(2.0 * self.cpu_time_limit)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.cpu_time_limit > 0.0 && self.cpu_time_limit.is_finite()) {
            out.push(format!("cpu_time_limit must be > 0, got {}", self.cpu_time_limit));
        }
        if let Some(wall) = self.wall_time_limit {
            if !(wall >= self.cpu_time_limit && wall.is_finite()) {
                out.push(format!("wall_time_limit ({wall}) must be >= cpu_time_limit ({})", self.cpu_time_limit));
            }
        }
        if self.memory_limit == 0 {
            out.push("memory_limit must be > 0".into());
        }
        if self.max_output == 0 {
            out.push("max_output must be > 0".into());
        }
        let mut guests = HashSet::new();
        for m in &self.mounts {
            match m.relative_guest_path() {
                None => out.push(format!("mount guest path {:?} is not a valid sandbox path", m.guest_path)),
                Some(p) => {
                    if !guests.insert(p) {
                        out.push(format!("duplicate mount guest path {:?}", m.guest_path));
                    }
                }
            }
        }
        let mut deps = HashSet::new();
        for d in &self.dependencies {
            if !deps.insert(d) {
                out.push(format!("duplicate dependency {d:?}"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Exited,
    CpuLimit,
    WallLimit,
    MemoryLimit,
    OutputLimit,
    SandboxFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Code(i32),
    Signal(i32),
    Unknown,
}

impl ExitStatus {
    pub fn success(self) -> bool {
        self == ExitStatus::Code(0)
    }
}

/// What one sandboxed run produced. Output streams are captured in memory
/// and already truncated to the policy's `max_output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub exit_status: ExitStatus,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub cpu_time_used: f64,
    pub wall_time_used: f64,
    pub memory_peak: u64,
    pub termination: Termination,
    /// Diagnostic for `SandboxFailure`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ExecutionOutcome {
    pub fn sandbox_failure(reason: impl Into<String>) -> Self {
        ExecutionOutcome {
            exit_status: ExitStatus::Unknown,
            stdout: Vec::new(),
            stderr: Vec::new(),
            cpu_time_used: 0.0,
            wall_time_used: 0.0,
            memory_peak: 0,
            termination: Termination::SandboxFailure,
            failure: Some(reason.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_network_isolation: bool,
    pub supports_memory_limit: bool,
    pub supports_mounts: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("mount source {0} does not exist")]
    MissingMount(PathBuf),
    #[error("unknown dependency bundle {0:?}")]
    UnknownBundle(String),
    #[error("invalid dependency bundle {id:?}: {reason}")]
    InvalidBundle { id: String, reason: String },
    #[error("invalid sandbox policy: {0}")]
    InvalidPolicy(String),
    #[error("backend cannot satisfy policy: {0}")]
    Unsupported(String),
    #[error("invalid sandbox path {0:?}")]
    InvalidPath(String),
    #[error("sandbox handle already torn down")]
    TornDown,
    #[error("sandbox i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub trait SandboxBackend: Send + Sync {
    fn name(&self) -> &'static str;

    fn capabilities(&self) -> Capabilities;

    /// Creates an isolated working directory with mounts and dependency
    /// bundles staged. Fails before any code runs when a mount source or
    /// bundle is missing.
    fn prepare(&self, policy: &SandboxPolicy) -> Result<Box<dyn SandboxHandle>, SandboxError>;
}

/// One prepared sandbox. Owned by a single job; dropping it tears it down.
pub trait SandboxHandle: Send {
    /// Writes a file relative to the working directory.
    fn write_file(&mut self, path: &str, data: &[u8], executable: bool) -> Result<(), SandboxError>;

    fn read_file(&self, path: &str) -> Result<Option<Vec<u8>>, SandboxError>;

    /// Regular files in the working directory, excluding mounts and staged
    /// bundles, as `(relative path, contents)` sorted by path.
    fn files(&self) -> Result<Vec<(String, Vec<u8>)>, SandboxError>;

    /// Runs `argv` with the working directory as cwd.
    fn execute(&mut self, argv: &[String], stdin: Option<&[u8]>) -> ExecutionOutcome;

    /// Releases all resources. Idempotent; errors are logged, not returned.
    fn teardown(&mut self);
}
