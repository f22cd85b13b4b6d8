//! OS-process sandbox backend.
//!
//! Each handle owns a slot from a fixed pool. A slot maps to a private
//! working directory and, when running as root, to a dedicated uid
//! (`uid_base + slot`) so concurrent sandboxes cannot read each other's
//! files. Programs run in their own process group with rlimits applied and
//! are watched by a polling loop that enforces CPU, wall-clock and resident
//! memory limits. Network access is removed by entering a fresh network
//! namespace, in which only an unconfigured loopback device exists. Mounts
//! are bind mounts in a private mount namespace, so they never appear on the
//! host.

use std::collections::BTreeMap;
use std::ffi::CString;
use std::fs;
use std::io::{self, Read, Write};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::{chown, PermissionsExt};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use tracing::{debug, warn};

use super::bundle::BundleStore;
use super::{
    relative_inside, Capabilities, ExecutionOutcome, ExitStatus, SandboxBackend, SandboxError, SandboxHandle,
    SandboxPolicy, Termination,
};

const POLL_INTERVAL: Duration = Duration::from_millis(5);
const READER_GRACE: Duration = Duration::from_millis(500);
const DEFAULT_PATH: &str = "/usr/local/bin:/usr/bin:/bin";

/// How strongly the backend can isolate programs on this host.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsolationMode {
    /// Running as root: namespaces plus a per-slot unprivileged uid.
    Privileged,
    /// Unprivileged user namespaces: network and mount isolation, programs
    /// keep the service's uid.
    UserNamespace,
    /// No namespaces. Policies that forbid network access or declare mounts
    /// are refused.
    Unisolated,
}

#[derive(Debug, Clone)]
pub struct ProcessBackendConfig {
    pub work_root: PathBuf,
    pub bundles: BundleStore,
    pub max_concurrent: usize,
    pub uid_base: u32,
    /// `None` probes the host.
    pub isolation: Option<IsolationMode>,
    pub path_env: String,
    pub file_size_limit: u64,
    pub process_limit: u64,
}

impl Default for ProcessBackendConfig {
    fn default() -> Self {
        ProcessBackendConfig {
            work_root: std::env::temp_dir().join("sae-boxes"),
            bundles: BundleStore::empty(),
            max_concurrent: 8,
            uid_base: 60000,
            isolation: None,
            path_env: DEFAULT_PATH.into(),
            file_size_limit: 64 * 1024 * 1024,
            process_limit: 64,
        }
    }
}

struct Inner {
    config: ProcessBackendConfig,
    mode: IsolationMode,
    slots: Mutex<Vec<bool>>,
    slot_freed: Condvar,
    clock_ticks: f64,
}

#[derive(Clone)]
pub struct ProcessBackend {
    inner: Arc<Inner>,
}

impl ProcessBackend {
    pub fn new(config: ProcessBackendConfig) -> io::Result<Self> {
        fs::create_dir_all(&config.work_root)?;
        fs::set_permissions(&config.work_root, fs::Permissions::from_mode(0o711))?;
        let mode = config.isolation.unwrap_or_else(probe_isolation);
        debug!(?mode, root = %config.work_root.display(), "process sandbox backend ready");
        // SAFETY: sysconf has no preconditions.
        let ticks = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
        let max = config.max_concurrent.max(1);
        Ok(ProcessBackend {
            inner: Arc::new(Inner {
                config,
                mode,
                slots: Mutex::new(vec![false; max]),
                slot_freed: Condvar::new(),
                clock_ticks: if ticks > 0 { ticks as f64 } else { 100.0 },
            }),
        })
    }

    pub fn isolation(&self) -> IsolationMode {
        self.inner.mode
    }
}

fn probe_isolation() -> IsolationMode {
    // SAFETY: geteuid has no preconditions.
    let root = unsafe { libc::geteuid() } == 0;
    if root && probe(libc::CLONE_NEWNET | libc::CLONE_NEWNS, None) {
        return IsolationMode::Privileged;
    }
    if probe(libc::CLONE_NEWUSER | libc::CLONE_NEWNET | libc::CLONE_NEWNS, Some(IdMaps::current())) {
        return IsolationMode::UserNamespace;
    }
    IsolationMode::Unisolated
}

fn probe(flags: libc::c_int, maps: Option<IdMaps>) -> bool {
    let mut cmd = Command::new("true");
    cmd.env("PATH", DEFAULT_PATH).stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::null());
    // SAFETY: the closure only performs raw syscalls on pre-built data.
    unsafe {
        cmd.pre_exec(move || {
            if libc::unshare(flags) != 0 {
                return Err(io::Error::last_os_error());
            }
            if let Some(m) = &maps {
                m.apply()?;
            }
            Ok(())
        });
    }
    cmd.status().map(|s| s.success()).unwrap_or(false)
}

/// uid/gid maps written by the child after entering a user namespace.
#[derive(Clone)]
struct IdMaps {
    uid_map: CString,
    gid_map: CString,
}

impl IdMaps {
    fn current() -> Self {
        // SAFETY: getuid/getgid have no preconditions.
        let (uid, gid) = unsafe { (libc::getuid(), libc::getgid()) };
        IdMaps {
            uid_map: CString::new(format!("0 {uid} 1")).unwrap(),
            gid_map: CString::new(format!("0 {gid} 1")).unwrap(),
        }
    }

    /// Async-signal-safe; runs between fork and exec.
    fn apply(&self) -> io::Result<()> {
        write_proc(c"/proc/self/setgroups", c"deny")?;
        write_proc(c"/proc/self/uid_map", &self.uid_map)?;
        write_proc(c"/proc/self/gid_map", &self.gid_map)
    }
}

fn write_proc(path: &std::ffi::CStr, data: &std::ffi::CStr) -> io::Result<()> {
    // SAFETY: both pointers come from valid NUL-terminated strings.
    unsafe {
        let fd = libc::open(path.as_ptr(), libc::O_WRONLY);
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        let bytes = data.to_bytes();
        let n = libc::write(fd, bytes.as_ptr().cast(), bytes.len());
        libc::close(fd);
        if n < 0 {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(())
}

impl SandboxBackend for ProcessBackend {
    fn name(&self) -> &'static str {
        "process"
    }

    fn capabilities(&self) -> Capabilities {
        let isolated = self.inner.mode != IsolationMode::Unisolated;
        Capabilities { supports_network_isolation: isolated, supports_memory_limit: true, supports_mounts: isolated }
    }

    fn prepare(&self, policy: &SandboxPolicy) -> Result<Box<dyn SandboxHandle>, SandboxError> {
        let problems = policy.violations();
        if !problems.is_empty() {
            return Err(SandboxError::InvalidPolicy(problems.join("; ")));
        }
        if self.inner.mode == IsolationMode::Unisolated {
            if !policy.network_allowed {
                return Err(SandboxError::Unsupported("network isolation unavailable on this host".into()));
            }
            if !policy.mounts.is_empty() {
                return Err(SandboxError::Unsupported("mounts unavailable on this host".into()));
            }
        }
        for m in &policy.mounts {
            if !m.host_path.exists() {
                return Err(SandboxError::MissingMount(m.host_path.clone()));
            }
        }
        for dep in &policy.dependencies {
            self.inner.config.bundles.manifest(dep)?;
        }

        let slot = self.inner.acquire_slot();
        let dir = self.inner.config.work_root.join(format!("box-{slot}-{}", uuid::Uuid::now_v7().simple()));
        let mut handle = ProcessHandle {
            inner: Arc::clone(&self.inner),
            slot,
            dir,
            policy: policy.clone(),
            env: BTreeMap::new(),
            reserved: Vec::new(),
            mounts: Vec::new(),
            released: false,
        };
        handle.stage()?;
        Ok(Box::new(handle))
    }
}

impl Inner {
    fn acquire_slot(&self) -> usize {
        let mut slots = self.slots.lock();
        loop {
            if let Some(i) = slots.iter().position(|used| !used) {
                slots[i] = true;
                return i;
            }
            self.slot_freed.wait(&mut slots);
        }
    }

    fn release_slot(&self, slot: usize) {
        self.slots.lock()[slot] = false;
        self.slot_freed.notify_one();
    }

    fn ids(&self, slot: usize) -> Option<(u32, u32)> {
        (self.mode == IsolationMode::Privileged).then(|| {
            let id = self.config.uid_base + slot as u32;
            (id, id)
        })
    }
}

struct PreparedMount {
    source: CString,
    target: CString,
    read_only: bool,
    /// Flags of the source mount that a remount must keep.
    flags: libc::c_ulong,
}

const SEALED_DIRS: [&str; 5] = ["/tmp", "/var/tmp", "/dev/shm", "/run/lock", "/dev/mqueue"];

/// Mount flags of the filesystem holding `path` that an unprivileged
/// remount is not allowed to clear.
fn locked_flags(path: &Path) -> libc::c_ulong {
    let Ok(c) = CString::new(path.as_os_str().as_bytes()) else {
        return 0;
    };
    // SAFETY: statvfs is plain old data; zeroed is a valid value.
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: c is NUL-terminated and st is a valid out pointer.
    if unsafe { libc::statvfs(c.as_ptr(), &mut st) } != 0 {
        return 0;
    }
    let pairs = [
        (libc::ST_NOSUID, libc::MS_NOSUID),
        (libc::ST_NODEV, libc::MS_NODEV),
        (libc::ST_NOEXEC, libc::MS_NOEXEC),
        (libc::ST_NOATIME, libc::MS_NOATIME),
        (libc::ST_NODIRATIME, libc::MS_NODIRATIME),
        (libc::ST_RELATIME, libc::MS_RELATIME),
    ];
    pairs.iter().filter(|(st_flag, _)| st.f_flag & st_flag != 0).fold(0, |acc, (_, ms)| acc | ms)
}

fn sealed_dirs() -> Vec<(CString, libc::c_ulong)> {
    SEALED_DIRS
        .iter()
        .map(Path::new)
        .filter(|p| p.is_dir())
        .filter_map(|p| Some((CString::new(p.as_os_str().as_bytes()).ok()?, locked_flags(p))))
        .collect()
}

struct ProcessHandle {
    inner: Arc<Inner>,
    slot: usize,
    dir: PathBuf,
    policy: SandboxPolicy,
    env: BTreeMap<String, String>,
    reserved: Vec<PathBuf>,
    mounts: Vec<PreparedMount>,
    released: bool,
}

impl ProcessHandle {
    fn ids(&self) -> Option<(u32, u32)> {
        self.inner.ids(self.slot)
    }

    fn stage(&mut self) -> Result<(), SandboxError> {
        fs::create_dir(&self.dir)?;
        fs::set_permissions(&self.dir, fs::Permissions::from_mode(0o700))?;
        if let Some((uid, gid)) = self.ids() {
            chown(&self.dir, Some(uid), Some(gid))?;
        }

        for dep in self.policy.dependencies.clone() {
            let (manifest, install) = self.inner.config.bundles.stage(&dep, &self.dir)?;
            if let Some(rel) = relative_inside(&manifest.install_path) {
                self.reserved.push(rel);
            }
            make_traversable(&self.dir, &install)?;
            let install_str = install.to_string_lossy().into_owned();
            for (key, value) in manifest.env {
                let value = value.replace("{install}", &install_str);
                self.env
                    .entry(key)
                    .and_modify(|v| {
                        v.push(':');
                        v.push_str(&value);
                    })
                    .or_insert(value);
            }
        }

        for m in self.policy.mounts.clone() {
            let rel = m.relative_guest_path().ok_or_else(|| SandboxError::InvalidPath(m.guest_path.clone()))?;
            let target = self.dir.join(&rel);
            if m.host_path.is_dir() {
                fs::create_dir_all(&target)?;
            } else {
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::write(&target, b"")?;
            }
            make_traversable(&self.dir, &target)?;
            let source = m.host_path.canonicalize()?;
            self.mounts.push(PreparedMount {
                source: cstring(source.as_os_str().as_bytes())?,
                target: cstring(target.as_os_str().as_bytes())?,
                read_only: m.read_only,
                flags: locked_flags(&source),
            });
            self.reserved.push(rel);
        }
        Ok(())
    }

    fn resolve(&self, path: &str) -> Result<PathBuf, SandboxError> {
        relative_inside(path).map(|rel| self.dir.join(rel)).ok_or_else(|| SandboxError::InvalidPath(path.into()))
    }

    fn run(&mut self, argv: &[String], stdin: Option<&[u8]>) -> Result<ExecutionOutcome, String> {
        let policy = &self.policy;
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .current_dir(&self.dir)
            .env_clear()
            .env("PATH", &self.inner.config.path_env)
            .env("HOME", &self.dir)
            .env("TMPDIR", &self.dir)
            .env("LANG", "C.UTF-8")
            .envs(&self.env)
            .stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);

        let plan = ChildSetup::new(self, policy);
        // SAFETY: `ChildSetup::apply` only issues raw syscalls on data built
        // before the fork; it does not allocate or take locks.
        unsafe {
            cmd.pre_exec(move || plan.apply());
        }

        let start = Instant::now();
        let mut child = cmd.spawn().map_err(|e| format!("failed to start {:?}: {e}", argv[0]))?;
        let pid = child.id() as libc::pid_t;

        if let (Some(mut pipe), Some(data)) = (child.stdin.take(), stdin) {
            let data = data.to_vec();
            thread::spawn(move || {
                let _ = pipe.write_all(&data);
            });
        }
        let limit = policy.max_output as usize;
        let overflow = Arc::new(AtomicBool::new(false));
        let (done_tx, done_rx) = mpsc::channel();
        let stdout = spawn_reader(child.stdout.take(), limit, pid, Arc::clone(&overflow), done_tx.clone());
        let stderr = spawn_reader(child.stderr.take(), limit, pid, Arc::clone(&overflow), done_tx);

        let (wait_tx, wait_rx) = mpsc::channel();
        thread::spawn(move || {
            let mut status = 0;
            // SAFETY: rusage is plain old data; zeroed is a valid value.
            let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
            // SAFETY: pid is our direct child and has not been reaped.
            let rc = unsafe { libc::wait4(pid, &mut status, 0, &mut usage) };
            let _ = wait_tx.send((rc, status, usage));
        });
        drop(child);

        let wall_limit = Duration::from_secs_f64(policy.wall_time_limit());
        let mut killed: Option<Termination> = None;
        let mut observed_peak = 0u64;
        let (rc, status, usage) = loop {
            match wait_rx.recv_timeout(POLL_INTERVAL) {
                Ok(r) => break r,
                Err(mpsc::RecvTimeoutError::Timeout) => {}
                Err(mpsc::RecvTimeoutError::Disconnected) => return Err("wait thread vanished".into()),
            }
            if killed.is_some() {
                continue;
            }
            if let Some(peak) = peak_rss(pid) {
                observed_peak = observed_peak.max(peak);
            }
            let reason = if start.elapsed() >= wall_limit {
                Some(Termination::WallLimit)
            } else if cpu_seconds(pid, self.inner.clock_ticks).is_some_and(|c| c >= policy.cpu_time_limit) {
                Some(Termination::CpuLimit)
            } else if observed_peak >= policy.memory_limit {
                Some(Termination::MemoryLimit)
            } else {
                None
            };
            if reason.is_some() {
                kill_group(pid);
                killed = reason;
            }
        };
        let wall = start.elapsed().as_secs_f64();
        kill_group(pid);
        if rc < 0 {
            return Err(format!("wait4 failed: {}", io::Error::last_os_error()));
        }

        let deadline = Instant::now() + READER_GRACE;
        for _ in 0..2 {
            let left = deadline.saturating_duration_since(Instant::now());
            if done_rx.recv_timeout(left).is_err() {
                warn!(pid, "output pipes still open after exit; stray process holds them");
                break;
            }
        }

        let exit_status = if libc::WIFEXITED(status) {
            ExitStatus::Code(libc::WEXITSTATUS(status))
        } else if libc::WIFSIGNALED(status) {
            ExitStatus::Signal(libc::WTERMSIG(status))
        } else {
            ExitStatus::Unknown
        };
        let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 / 1e6;
        let cpu = tv(usage.ru_utime) + tv(usage.ru_stime);
        let memory_peak = observed_peak.max(usage.ru_maxrss.max(0) as u64 * 1024);

        let termination = match killed {
            Some(reason) => reason,
            None if overflow.load(Ordering::SeqCst) => Termination::OutputLimit,
            None if exit_status == ExitStatus::Signal(libc::SIGXCPU) && cpu >= policy.cpu_time_limit => {
                Termination::CpuLimit
            }
            None if exit_status == ExitStatus::Signal(libc::SIGKILL) && cpu >= policy.cpu_time_limit => {
                Termination::CpuLimit
            }
            None if !exit_status.success() && memory_peak >= policy.memory_limit => Termination::MemoryLimit,
            None => Termination::Exited,
        };

        let stdout = stdout.lock().clone();
        let stderr = hide_box_path(&stderr.lock(), self.dir.as_os_str().as_bytes());
        Ok(ExecutionOutcome {
            exit_status,
            stdout,
            stderr,
            cpu_time_used: cpu,
            wall_time_used: wall,
            memory_peak,
            termination,
            failure: None,
        })
    }
}

/// Data the forked child needs before exec, prepared in the parent.
struct ChildSetup {
    unshare_flags: libc::c_int,
    id_maps: Option<IdMaps>,
    /// The working directory, bound onto itself so it stays writable when
    /// an enclosing directory is sealed.
    own_dir: Option<CString>,
    mounts: Vec<(CString, CString, bool, libc::c_ulong)>,
    /// World-writable host directories made read-only for the program.
    sealed: Vec<(CString, libc::c_ulong)>,
    limits: Vec<(libc::__rlimit_resource_t, u64, u64)>,
    ids: Option<(u32, u32)>,
}

impl ChildSetup {
    fn new(handle: &ProcessHandle, policy: &SandboxPolicy) -> Self {
        let mode = handle.inner.mode;
        let mut flags = 0;
        if !policy.network_allowed {
            flags |= libc::CLONE_NEWNET;
        }
        let isolated = mode != IsolationMode::Unisolated;
        if isolated {
            flags |= libc::CLONE_NEWNS;
        }
        let mut id_maps = None;
        if mode == IsolationMode::UserNamespace && flags != 0 {
            flags |= libc::CLONE_NEWUSER;
            id_maps = Some(IdMaps::current());
        }
        if mode == IsolationMode::Privileged {
            flags |= libc::CLONE_NEWIPC;
        }

        let cpu_soft = policy.cpu_time_limit.ceil() as u64 + 1;
        let mem = policy.memory_limit;
        let address_space = mem.saturating_mul(2).max(mem.saturating_add(512 * 1024 * 1024));
        let cfg = &handle.inner.config;
        let mut limits = vec![
            (libc::RLIMIT_CPU, cpu_soft, cpu_soft + 1),
            (libc::RLIMIT_AS, address_space, address_space),
            (libc::RLIMIT_FSIZE, cfg.file_size_limit, cfg.file_size_limit),
            (libc::RLIMIT_CORE, 0, 0),
            (libc::RLIMIT_NOFILE, 256, 256),
        ];
        let ids = handle.ids();
        if ids.is_some() {
            limits.push((libc::RLIMIT_NPROC, cfg.process_limit, cfg.process_limit));
        }
        ChildSetup {
            unshare_flags: flags,
            id_maps,
            own_dir: isolated.then(|| cstring(handle.dir.as_os_str().as_bytes()).ok()).flatten(),
            mounts: handle.mounts.iter().map(|m| (m.source.clone(), m.target.clone(), m.read_only, m.flags)).collect(),
            sealed: if isolated { sealed_dirs() } else { Vec::new() },
            limits,
            ids,
        }
    }

    /// Runs in the child between fork and exec.
    fn apply(&self) -> io::Result<()> {
        fn check(rc: libc::c_int) -> io::Result<()> {
            if rc != 0 {
                Err(io::Error::last_os_error())
            } else {
                Ok(())
            }
        }
        // SAFETY: raw syscalls on NUL-terminated strings owned by `self`.
        unsafe {
            if self.unshare_flags != 0 {
                check(libc::unshare(self.unshare_flags))?;
            }
            if let Some(maps) = &self.id_maps {
                maps.apply()?;
            }
            if self.unshare_flags & libc::CLONE_NEWNS != 0 {
                check(libc::mount(
                    std::ptr::null(),
                    c"/".as_ptr(),
                    std::ptr::null(),
                    libc::MS_REC | libc::MS_PRIVATE,
                    std::ptr::null(),
                ))?;
                let bind = |source: &CString, target: &CString| {
                    check(libc::mount(
                        source.as_ptr(),
                        target.as_ptr(),
                        std::ptr::null(),
                        libc::MS_BIND | libc::MS_REC,
                        std::ptr::null(),
                    ))
                };
                let read_only = |target: &CString, keep: libc::c_ulong| {
                    check(libc::mount(
                        std::ptr::null(),
                        target.as_ptr(),
                        std::ptr::null(),
                        libc::MS_BIND | libc::MS_REMOUNT | libc::MS_RDONLY | libc::MS_NOSUID | libc::MS_NODEV | keep,
                        std::ptr::null(),
                    ))
                };
                if let Some(dir) = &self.own_dir {
                    bind(dir, dir)?;
                }
                for (source, target, ro, keep) in &self.mounts {
                    bind(source, target)?;
                    if *ro {
                        read_only(target, *keep)?;
                    }
                }
                // A recursive bind carries the mounts above along, and the
                // read-only flag only applies to the top mount.
                for (dir, keep) in &self.sealed {
                    bind(dir, dir)?;
                    read_only(dir, *keep)?;
                }
                // The cwd still points into the old tree, where `..` would
                // lead to the unsealed directories.
                if let Some(dir) = &self.own_dir {
                    check(libc::chdir(dir.as_ptr()))?;
                }
            }
            for &(resource, soft, hard) in &self.limits {
                let lim = libc::rlimit { rlim_cur: soft, rlim_max: hard };
                check(libc::setrlimit(resource, &lim))?;
            }
            if let Some((uid, gid)) = self.ids {
                check(libc::setgroups(0, std::ptr::null()))?;
                check(libc::setgid(gid))?;
                check(libc::setuid(uid))?;
            }
        }
        Ok(())
    }
}

/// Rewrites host paths inside the box as relative ones, so tracebacks do
/// not reveal the host layout and read the same in every box.
fn hide_box_path(text: &[u8], dir: &[u8]) -> Vec<u8> {
    if dir.is_empty() {
        return text.to_vec();
    }
    let mut out = Vec::with_capacity(text.len());
    let mut i = 0;
    while i < text.len() {
        let next = text.get(i + dir.len()).copied();
        let boundary = !matches!(next, Some(c) if c.is_ascii_alphanumeric() || matches!(c, b'-' | b'_' | b'.'));
        if boundary && text[i..].starts_with(dir) {
            i += dir.len();
            if next == Some(b'/') {
                i += 1;
            } else {
                out.push(b'.');
            }
        } else {
            out.push(text[i]);
            i += 1;
        }
    }
    out
}

fn cstring(bytes: &[u8]) -> Result<CString, SandboxError> {
    CString::new(bytes).map_err(|_| SandboxError::InvalidPath(String::from_utf8_lossy(bytes).into_owned()))
}

/// Makes every directory from `root` down to `path` world-traversable so a
/// dropped uid can reach root-owned staged content.
fn make_traversable(root: &Path, path: &Path) -> io::Result<()> {
    let mut cur = path.to_path_buf();
    while cur.starts_with(root) && cur != root {
        if cur.is_dir() {
            fs::set_permissions(&cur, fs::Permissions::from_mode(0o755))?;
        }
        if !cur.pop() {
            break;
        }
    }
    Ok(())
}

type Buffer = Arc<Mutex<Vec<u8>>>;

fn spawn_reader<R: Read + Send + 'static>(
    source: Option<R>,
    limit: usize,
    pid: libc::pid_t,
    overflow: Arc<AtomicBool>,
    done: mpsc::Sender<()>,
) -> Buffer {
    let buf: Buffer = Arc::new(Mutex::new(Vec::new()));
    let out = Arc::clone(&buf);
    thread::spawn(move || {
        if let Some(mut source) = source {
            let mut chunk = [0u8; 8192];
            loop {
                match source.read(&mut chunk) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => {
                        let mut b = out.lock();
                        let room = limit.saturating_sub(b.len());
                        b.extend_from_slice(&chunk[..n.min(room)]);
                        if n > room {
                            overflow.store(true, Ordering::SeqCst);
                            kill_group(pid);
                            break;
                        }
                    }
                }
            }
        }
        let _ = done.send(());
    });
    buf
}

fn kill_group(pid: libc::pid_t) {
    // SAFETY: signalling our own child and its process group.
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
        libc::kill(pid, libc::SIGKILL);
    }
}

fn cpu_seconds(pid: libc::pid_t, ticks: f64) -> Option<f64> {
    let stat = fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    let rest = &stat[stat.rfind(')')? + 1..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let utime: f64 = fields.get(11)?.parse().ok()?;
    let stime: f64 = fields.get(12)?.parse().ok()?;
    Some((utime + stime) / ticks)
}

fn peak_rss(pid: libc::pid_t) -> Option<u64> {
    let status = fs::read_to_string(format!("/proc/{pid}/status")).ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Kills every process still running under `uid`.
fn kill_uid(uid: u32) {
    let Ok(entries) = fs::read_dir("/proc") else {
        return;
    };
    for entry in entries.flatten() {
        let Some(pid) = entry.file_name().to_str().and_then(|s| s.parse::<libc::pid_t>().ok()) else {
            continue;
        };
        let Ok(status) = fs::read_to_string(entry.path().join("status")) else {
            continue;
        };
        let real_uid = status
            .lines()
            .find(|l| l.starts_with("Uid:"))
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|s| s.parse::<u32>().ok());
        if real_uid == Some(uid) {
            // SAFETY: plain kill(2).
            unsafe {
                libc::kill(pid, libc::SIGKILL);
            }
        }
    }
}

fn walk(root: &Path, dir: &Path, reserved: &[PathBuf], out: &mut Vec<(String, Vec<u8>)>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let rel = path.strip_prefix(root).map_err(io::Error::other)?;
        if reserved.iter().any(|r| rel.starts_with(r)) {
            continue;
        }
        let ty = entry.file_type()?;
        if ty.is_dir() {
            walk(root, &path, reserved, out)?;
        } else if ty.is_file() {
            out.push((rel.to_string_lossy().into_owned(), fs::read(&path)?));
        }
    }
    Ok(())
}

impl SandboxHandle for ProcessHandle {
    fn write_file(&mut self, path: &str, data: &[u8], executable: bool) -> Result<(), SandboxError> {
        if self.released {
            return Err(SandboxError::TornDown);
        }
        let target = self.resolve(path)?;
        if let Some(parent) = target.parent() {
            if !parent.exists() {
                fs::create_dir_all(parent)?;
                if let Some((uid, gid)) = self.ids() {
                    let mut cur = parent.to_path_buf();
                    while cur != self.dir && cur.starts_with(&self.dir) {
                        chown(&cur, Some(uid), Some(gid))?;
                        cur.pop();
                    }
                }
            }
        }
        fs::write(&target, data)?;
        fs::set_permissions(&target, fs::Permissions::from_mode(if executable { 0o755 } else { 0o644 }))?;
        if let Some((uid, gid)) = self.ids() {
            chown(&target, Some(uid), Some(gid))?;
        }
        Ok(())
    }

    fn read_file(&self, path: &str) -> Result<Option<Vec<u8>>, SandboxError> {
        let target = self.resolve(path)?;
        match fs::read(target) {
            Ok(d) => Ok(Some(d)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn files(&self) -> Result<Vec<(String, Vec<u8>)>, SandboxError> {
        let mut out = Vec::new();
        walk(&self.dir, &self.dir, &self.reserved, &mut out)?;
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    fn execute(&mut self, argv: &[String], stdin: Option<&[u8]>) -> ExecutionOutcome {
        if self.released {
            return ExecutionOutcome::sandbox_failure("sandbox handle already torn down");
        }
        if argv.is_empty() {
            return ExecutionOutcome::sandbox_failure("empty command");
        }
        self.run(argv, stdin).unwrap_or_else(ExecutionOutcome::sandbox_failure)
    }

    fn teardown(&mut self) {
        if self.released {
            return;
        }
        self.released = true;
        if let Some((uid, _)) = self.ids() {
            kill_uid(uid);
        }
        if let Err(e) = fs::remove_dir_all(&self.dir) {
            if e.kind() != io::ErrorKind::NotFound {
                warn!(dir = %self.dir.display(), error = %e, "failed to remove sandbox directory");
            }
        }
        self.inner.release_slot(self.slot);
    }
}

impl Drop for ProcessHandle {
    fn drop(&mut self) {
        self.teardown();
    }
}
