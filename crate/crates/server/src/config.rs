//! Service configuration, read from one TOML file. Relative paths are
//! resolved against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, NaiveDate, Utc};
use sae_core::manifest::parse_size;
use sae_core::scheduler::{SchedulerConfig, DEFAULT_HEARTBEAT_WINDOW, DEFAULT_MAX_ATTEMPTS};
use serde::{Deserialize, Deserializer};

pub const DEFAULT_UPLOAD_LIMIT: u64 = 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Store root: blobs, records, sandboxes.
    pub data_dir: PathBuf,
    /// In-process workers started by `serve`.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// TOML list of `[[user]]` entries applied at startup.
    #[serde(default)]
    pub users_file: Option<PathBuf>,
    /// Shared secret for remote workers. Without it the worker endpoints
    /// are disabled.
    #[serde(default)]
    pub worker_token: Option<String>,
    /// Per-file cap on submission parts, e.g. `"1MiB"`.
    #[serde(default = "default_upload_limit", deserialize_with = "size")]
    pub upload_limit: u64,
    #[serde(default = "default_session_hours")]
    pub session_hours: u64,
    pub course: CourseConfig,
    #[serde(default)]
    pub sandbox: SandboxConfig,
    #[serde(default)]
    pub scheduler: SchedulerSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CourseConfig {
    /// Day 0 of the course.
    pub start_date: NaiveDate,
    /// Global deadline shown as time left.
    #[serde(default)]
    pub end: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Process,
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolationSetting {
    Auto,
    Privileged,
    UserNamespace,
    Unisolated,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxConfig {
    #[serde(default = "default_backend")]
    pub backend: BackendKind,
    /// Defaults to `<data_dir>/sandboxes`.
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
    #[serde(default)]
    pub bundles_dir: Option<PathBuf>,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default = "default_isolation")]
    pub isolation: IsolationSetting,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            backend: default_backend(),
            work_dir: None,
            bundles_dir: None,
            max_concurrent: default_max_concurrent(),
            isolation: default_isolation(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    /// Seconds without a heartbeat before a worker's job is requeued.
    #[serde(default = "default_heartbeat_window")]
    pub heartbeat_window: f64,
    /// Seconds between reaper passes.
    #[serde(default = "default_reap_interval")]
    pub reap_interval: f64,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        SchedulerSection {
            max_attempts: default_max_attempts(),
            heartbeat_window: default_heartbeat_window(),
            reap_interval: default_reap_interval(),
        }
    }
}

impl SchedulerSection {
    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            max_attempts: self.max_attempts,
            heartbeat_window: Duration::from_secs_f64(self.heartbeat_window),
        }
    }

    pub fn reap_every(&self) -> Duration {
        Duration::from_secs_f64(self.reap_interval)
    }
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn default_workers() -> usize {
    2
}
fn default_upload_limit() -> u64 {
    DEFAULT_UPLOAD_LIMIT
}
fn default_session_hours() -> u64 {
    12
}
fn default_backend() -> BackendKind {
    BackendKind::Process
}
fn default_max_concurrent() -> usize {
    8
}
fn default_isolation() -> IsolationSetting {
    IsolationSetting::Auto
}
fn default_max_attempts() -> u32 {
    DEFAULT_MAX_ATTEMPTS
}
fn default_heartbeat_window() -> f64 {
    DEFAULT_HEARTBEAT_WINDOW.as_secs_f64()
}
fn default_reap_interval() -> f64 {
    1.0
}

fn size<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Bytes(u64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Bytes(n) => Ok(n),
        Raw::Text(s) => parse_size(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid size {s:?}"))),
    }
}

impl Config {
    /// A configuration with defaults for everything but the essentials.
    pub fn new(data_dir: impl Into<PathBuf>, start_date: NaiveDate) -> Self {
        Config {
            listen: default_listen(),
            data_dir: data_dir.into(),
            workers: default_workers(),
            users_file: None,
            worker_token: None,
            upload_limit: DEFAULT_UPLOAD_LIMIT,
            session_hours: default_session_hours(),
            course: CourseConfig { start_date, end: None },
            sandbox: SandboxConfig::default(),
            scheduler: SchedulerSection::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Config::parse(&text, base).map_err(|message| ConfigError::Invalid { path: path.into(), message })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Config, String> {
        let mut config: Config = toml::from_str(text).map_err(|e| e.to_string())?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.data_dir);
        for p in [config.users_file.as_mut(), config.sandbox.work_dir.as_mut(), config.sandbox.bundles_dir.as_mut()]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        config.check()?;
        Ok(config)
    }

    fn check(&self) -> Result<(), String> {
        if self.upload_limit == 0 {
            return Err("upload_limit must be positive".into());
        }
        if self.scheduler.max_attempts == 0 {
            return Err("scheduler.max_attempts must be at least 1".into());
        }
        if !(self.scheduler.heartbeat_window > 0.0 && self.scheduler.reap_interval > 0.0) {
            return Err("scheduler intervals must be positive".into());
        }
        if self.session_hours == 0 {
            return Err("session_hours must be positive".into());
        }
        if matches!(&self.worker_token, Some(t) if t.len() < 16) {
            return Err("worker_token must be at least 16 characters".into());
        }
        Ok(())
    }

    pub fn sandbox_dir(&self) -> PathBuf {
        self.sandbox.work_dir.clone().unwrap_or_else(|| self.data_dir.join("sandboxes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_defaults_and_resolves_paths() {
        let text = r#"
            data_dir = "data"
            upload_limit = "2MiB"
            users_file = "/etc/sae/users.toml"
            [course]
            start_date = "2024-05-06"
            end = "2024-06-28T17:00:00Z"
            [sandbox]
            backend = "null"
            bundles_dir = "bundles"
        "#;
        let c = Config::parse(text, Path::new("/srv/sae")).unwrap();
        assert_eq!(c.data_dir, Path::new("/srv/sae/data"));
        assert_eq!(c.sandbox.bundles_dir.as_deref(), Some(Path::new("/srv/sae/bundles")));
        assert_eq!(c.users_file.as_deref(), Some(Path::new("/etc/sae/users.toml")));
        assert_eq!(c.upload_limit, 2 << 20);
        assert_eq!(c.workers, 2);
        assert_eq!(c.sandbox.backend, BackendKind::Null);
        assert_eq!(c.scheduler.scheduler_config(), SchedulerConfig::default());
        assert_eq!(c.sandbox_dir(), Path::new("/srv/sae/data/sandboxes"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let base = Path::new("/");
        let course = "[course]\nstart_date = \"2024-05-06\"\n";
        assert!(Config::parse(&format!("data_dir = \"d\"\nport = 1\n{course}"), base).unwrap_err().contains("port"));
        assert!(Config::parse(&format!("data_dir = \"d\"\nupload_limit = \"lots\"\n{course}"), base).is_err());
        assert!(Config::parse(&format!("data_dir = \"d\"\nworker_token = \"short\"\n{course}"), base).is_err());
        assert!(Config::parse("data_dir = \"d\"\n", base).unwrap_err().contains("course"));
    }
}
