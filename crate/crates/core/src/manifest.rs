//! Task directories: a `task.toml` manifest next to the files it names.
//!
//! The format is documented in `docs/manifest.md`. Loading is free of side
//! effects; [`import_task`] writes blobs and records to a store.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::Spanned;

use crate::materials::{self, check_statement, MaterialCategory};
use crate::model::{
    validate_task, CheckerKind, CheckerPolicy, CommandTemplate, FeedbackVisibility, LanguageProfile, TaskField,
    TaskSpec, TestCase, Weight, DEFAULT_CHECKER_TIME_LIMIT,
};
use crate::sandbox::{relative_inside, Mount, SandboxPolicy, DEFAULT_MAX_OUTPUT, DEFAULT_MEMORY_LIMIT};
use crate::store::{BlobRef, RecordKind, Store, StoreError};

pub const MANIFEST_FILE: &str = "task.toml";
pub const DEFAULT_MAX_SCORE: u32 = 100;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    /// One line per problem, each prefixed with `task.toml:<line>:`.
    #[error("{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A parsed and validated task with the contents of every file it names.
#[derive(Debug, Clone)]
pub struct LoadedTask {
    pub spec: TaskSpec,
    pub blobs: BTreeMap<BlobRef, Vec<u8>>,
    /// Statement file name and contents, stored as a material on import.
    pub statement: Option<(String, Vec<u8>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Imported {
    pub task_id: String,
    pub revision: u64,
    /// Blobs that were not in the store before.
    pub new_blobs: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    id: Spanned<String>,
    title: Spanned<String>,
    statement: Option<Spanned<String>>,
    slots: Spanned<Vec<String>>,
    max_score: Option<Spanned<u32>>,
    #[serde(default)]
    unlock_day: u32,
    pool: Option<String>,
    checker: Option<Spanned<RawChecker>>,
    sandbox: Option<Spanned<RawSandbox>>,
    #[serde(default, rename = "language")]
    languages: Vec<Spanned<RawLanguage>>,
    #[serde(default, rename = "case")]
    cases: Vec<Spanned<RawCase>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChecker {
    kind: String,
    epsilon: Option<f64>,
    program: Option<String>,
    time_limit: Option<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawSize {
    Bytes(u64),
    Text(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSandbox {
    cpu_time_limit: Option<f64>,
    wall_time_limit: Option<f64>,
    memory_limit: Option<RawSize>,
    max_output: Option<RawSize>,
    #[serde(default)]
    network: bool,
    #[serde(default)]
    dependencies: Vec<String>,
    #[serde(default)]
    mounts: Vec<RawMount>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMount {
    host: String,
    guest: String,
    read_only: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLanguage {
    id: String,
    name: Option<String>,
    #[serde(default)]
    extension: String,
    compile: Option<Vec<String>>,
    run: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCase {
    id: Option<String>,
    stdin: Option<String>,
    expected: Option<String>,
    #[serde(default)]
    args: Vec<String>,
    weight: Option<toml::Value>,
    visibility: Option<FeedbackVisibility>,
}

/// Parses sizes such as `1048576`, `"512KiB"`, `"256MiB"`, `"1GiB"`, `"64M"`.
/// All suffixes are binary.
pub fn parse_size(text: &str) -> Option<u64> {
    let t = text.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: u64 = num.parse().ok()?;
    let mult: u64 = match unit.trim() {
        "" | "B" => 1,
        "K" | "KB" | "KiB" => 1 << 10,
        "M" | "MB" | "MiB" => 1 << 20,
        "G" | "GB" | "GiB" => 1 << 30,
        _ => return None,
    };
    n.checked_mul(mult)
}

struct Problems<'a> {
    text: &'a str,
    out: Vec<(usize, String)>,
}

impl Problems<'_> {
    fn line(&self, span: &Range<usize>) -> usize {
        self.text[..span.start.min(self.text.len())].matches('\n').count() + 1
    }

    fn at(&mut self, span: &Range<usize>, message: impl Into<String>) {
        let line = self.line(span);
        self.out.push((line, message.into()));
    }

    fn finish(mut self) -> Vec<String> {
        self.out.sort_by_key(|(line, _)| *line);
        self.out.into_iter().map(|(l, m)| format!("{MANIFEST_FILE}:{l}: {m}")).collect()
    }
}

struct Files<'a> {
    dir: &'a Path,
    blobs: BTreeMap<BlobRef, Vec<u8>>,
}

impl Files<'_> {
    /// Reads a file below the task directory.
    fn read(&mut self, rel: &str) -> Result<Vec<u8>, String> {
        let inner = relative_inside(rel).filter(|_| !rel.starts_with('/'));
        let Some(inner) = inner else {
            return Err(format!("path {rel:?} must be relative and stay inside the task directory"));
        };
        fs::read(self.dir.join(inner)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => format!("file {rel} not found"),
            _ => format!("cannot read {rel}: {e}"),
        })
    }

    fn blob(&mut self, rel: &str) -> Result<BlobRef, String> {
        let data = self.read(rel)?;
        let r = BlobRef::of(&data);
        self.blobs.insert(r.clone(), data);
        Ok(r)
    }
}

fn read_manifest(dir: &Path) -> Result<String, ManifestError> {
    let path = dir.join(MANIFEST_FILE);
    fs::read_to_string(&path).map_err(|source| ManifestError::Io { path, source })
}

/// Parses and validates a task directory without touching any store.
pub fn load_task_dir(dir: &Path) -> Result<LoadedTask, ManifestError> {
    if !dir.is_dir() {
        return Err(ManifestError::Io {
            path: dir.to_path_buf(),
            source: io::Error::new(io::ErrorKind::NotFound, "task directory not found"),
        });
    }
    let text = read_manifest(dir)?;
    let mut problems = Problems { text: &text, out: Vec::new() };
    let raw: RawTask = match toml::from_str(&text) {
        Ok(raw) => raw,
        Err(e) => {
            let span = e.span().unwrap_or(0..0);
            problems.at(&span, e.message().to_string());
            return Err(ManifestError::Invalid(problems.finish()));
        }
    };
    let mut files = Files { dir, blobs: BTreeMap::new() };
    let mut lines: HashMap<TaskField, Range<usize>> = HashMap::new();
    lines.insert(TaskField::TaskId, raw.id.span());
    lines.insert(TaskField::Title, raw.title.span());
    lines.insert(TaskField::Slots, raw.slots.span());
    lines.insert(TaskField::Languages, raw.id.span());
    lines.insert(TaskField::Cases, raw.id.span());
    lines.insert(TaskField::MaxScore, raw.max_score.as_ref().map_or(raw.id.span(), Spanned::span));

    let checker = match &raw.checker {
        None => CheckerPolicy::default(),
        Some(c) => {
            lines.insert(TaskField::Checker, c.span());
            let span = c.span();
            let c = c.get_ref();
            let kind = match c.kind.as_str() {
                "exact" => Some(CheckerKind::Exact),
                "token" => Some(CheckerKind::Token),
                "numeric_token" => match c.epsilon {
                    Some(e) => Some(CheckerKind::NumericToken { numeric_epsilon: e }),
                    None => {
                        problems.at(&span, "numeric_token checker requires epsilon");
                        None
                    }
                },
                "custom" => match &c.program {
                    Some(p) => match files.blob(p) {
                        Ok(r) => Some(CheckerKind::Custom { custom_checker_ref: r }),
                        Err(m) => {
                            problems.at(&span, format!("checker program: {m}"));
                            None
                        }
                    },
                    None => {
                        problems.at(&span, "custom checker requires program");
                        None
                    }
                },
                other => {
                    problems.at(&span, format!("unknown checker kind {other:?} (exact, token, numeric_token, custom)"));
                    None
                }
            };
            if c.epsilon.is_some() && !matches!(kind, Some(CheckerKind::NumericToken { .. }) | None) {
                problems.at(&span, "epsilon only applies to the numeric_token checker");
            }
            if c.program.is_some() && !matches!(kind, Some(CheckerKind::Custom { .. }) | None) {
                problems.at(&span, "program only applies to the custom checker");
            }
            CheckerPolicy {
                kind: kind.unwrap_or(CheckerKind::Token),
                checker_time_limit: c.time_limit.unwrap_or(DEFAULT_CHECKER_TIME_LIMIT),
            }
        }
    };

    let sandbox = match &raw.sandbox {
        None => SandboxPolicy::default(),
        Some(s) => {
            lines.insert(TaskField::Sandbox, s.span());
            let span = s.span();
            let s = s.get_ref();
            let defaults = SandboxPolicy::default();
            let mut size = |v: &Option<RawSize>, what: &str, default: u64| match v {
                None => default,
                Some(RawSize::Bytes(n)) => *n,
                Some(RawSize::Text(t)) => parse_size(t).unwrap_or_else(|| {
                    problems.at(&span, format!("{what}: cannot parse size {t:?}"));
                    default
                }),
            };
            let memory_limit = size(&s.memory_limit, "memory_limit", DEFAULT_MEMORY_LIMIT);
            let max_output = size(&s.max_output, "max_output", DEFAULT_MAX_OUTPUT);
            let mut mounts = Vec::new();
            for m in &s.mounts {
                let host = match relative_inside(&m.host).filter(|_| !m.host.starts_with('/')) {
                    Some(rel) => dir.join(rel),
                    None => PathBuf::from(&m.host),
                };
                match fs::canonicalize(&host) {
                    Ok(host_path) => mounts.push(Mount {
                        host_path,
                        guest_path: m.guest.clone(),
                        read_only: m.read_only.unwrap_or(true),
                    }),
                    Err(_) => problems.at(&span, format!("mount source {} not found", m.host)),
                }
            }
            SandboxPolicy {
                cpu_time_limit: s.cpu_time_limit.unwrap_or(defaults.cpu_time_limit),
                wall_time_limit: s.wall_time_limit,
                memory_limit,
                max_output,
                mounts,
                network_allowed: s.network,
                dependencies: s.dependencies.clone(),
            }
        }
    };

    let mut languages = Vec::new();
    for (i, l) in raw.languages.iter().enumerate() {
        lines.insert(TaskField::Language(i), l.span());
        let l = l.get_ref();
        languages.push(LanguageProfile {
            profile_id: l.id.clone(),
            display_name: l.name.clone().unwrap_or_else(|| l.id.clone()),
            file_extension: l.extension.clone(),
            compile_command: l.compile.clone().map(CommandTemplate),
            run_command: CommandTemplate(l.run.clone()),
        });
    }

    let mut test_cases = Vec::new();
    for (i, c) in raw.cases.iter().enumerate() {
        lines.insert(TaskField::Case(i), c.span());
        let span = c.span();
        let c = c.get_ref();
        let case_id = c.id.clone().unwrap_or_else(|| (i + 1).to_string());
        let mut file = |rel: &Option<String>, what: &str, problems: &mut Problems| match rel {
            None => None,
            Some(p) => match files.blob(p) {
                Ok(r) => Some(r),
                Err(m) => {
                    problems.at(&span, format!("case {case_id:?}: {what}: {m}"));
                    None
                }
            },
        };
        let stdin_ref = file(&c.stdin, "stdin", &mut problems);
        let expected_ref = file(&c.expected, "expected output", &mut problems);
        let weight = match &c.weight {
            None => Weight::default(),
            Some(v) => match parse_weight(v) {
                Ok(w) => w,
                Err(m) => {
                    problems.at(&span, format!("case {case_id:?}: {m}"));
                    Weight::default()
                }
            },
        };
        test_cases.push(TestCase {
            case_id,
            stdin_ref,
            args: c.args.clone(),
            expected_ref,
            weight,
            feedback_visibility: c.visibility.unwrap_or_default(),
        });
    }

    let task_id = raw.id.get_ref().clone();
    let statement = match &raw.statement {
        None => None,
        Some(s) => match files.read(s.get_ref()) {
            Ok(data) => {
                let name = Path::new(s.get_ref())
                    .file_name()
                    .map_or_else(|| "statement".into(), |n| n.to_string_lossy().into_owned());
                Some((name, data))
            }
            Err(m) => {
                problems.at(&s.span(), format!("statement: {m}"));
                None
            }
        },
    };

    let spec = TaskSpec {
        statement_ref: statement.as_ref().map(|_| statement_material_id(&task_id)),
        task_id,
        title: raw.title.get_ref().clone(),
        file_slots: raw.slots.get_ref().clone(),
        languages,
        test_cases,
        checker,
        sandbox,
        max_score: raw.max_score.as_ref().map_or(DEFAULT_MAX_SCORE, |m| *m.get_ref()),
        unlock_day: raw.unlock_day,
        pool: raw.pool.clone(),
    };

    // Missing files were reported above with their path; don't repeat them
    // as "expected output required".
    let missing_files = !problems.out.is_empty();
    match validate_task(spec) {
        Ok(valid) if problems.out.is_empty() => {
            Ok(LoadedTask { spec: valid.into_inner(), blobs: files.blobs, statement })
        }
        Ok(_) => Err(ManifestError::Invalid(problems.finish())),
        Err(errs) => {
            for v in errs.0 {
                if missing_files && v.message.contains("expected output required") {
                    continue;
                }
                let span = lines.get(&v.field).cloned().unwrap_or(0..0);
                problems.at(&span, v.message);
            }
            Err(ManifestError::Invalid(problems.finish()))
        }
    }
}

fn parse_weight(v: &toml::Value) -> Result<Weight, String> {
    match v {
        toml::Value::Integer(n) if *n >= 0 => Ok(Weight::integer(*n as u64)),
        toml::Value::Float(f) if f.is_finite() && *f >= 0.0 => format!("{f}").parse().map_err(|e| format!("{e}")),
        toml::Value::String(s) => s.parse().map_err(|e| format!("{e}")),
        other => Err(format!("invalid weight {other}")),
    }
}

pub fn statement_material_id(task_id: &str) -> String {
    format!("{task_id}-statement")
}

/// Loads a task directory and stores it. Importing the same directory again
/// updates the task record in place; unchanged files are not stored twice.
pub fn import_task(store: &Store, dir: &Path) -> Result<Imported, ManifestError> {
    let loaded = load_task_dir(dir)?;
    store_task(store, loaded)
}

pub fn store_task(store: &Store, loaded: LoadedTask) -> Result<Imported, ManifestError> {
    let LoadedTask { spec, blobs, statement } = loaded;
    let mut new_blobs = 0;
    for (r, data) in &blobs {
        if !store.has_blob(r) {
            new_blobs += 1;
        }
        store.put_blob(data)?;
    }
    if let Some((name, data)) = &statement {
        let id = statement_material_id(&spec.task_id);
        if !store.has_blob(&BlobRef::of(data)) {
            new_blobs += 1;
        }
        let title = format!("{} (statement)", spec.title);
        let m = materials::add_material(store, &id, &title, name, data, spec.unlock_day, MaterialCategory::Exercise)?;
        check_statement(&spec, Some(&m)).map_err(|e| ManifestError::Invalid(vec![e]))?;
    }
    let revision = store.put_record(RecordKind::Task, &spec.task_id, &spec)?;
    Ok(Imported { task_id: spec.task_id, revision, new_blobs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("256MiB"), Some(256 << 20));
        assert_eq!(parse_size("64M"), Some(64 << 20));
        assert_eq!(parse_size("512 KiB"), Some(512 << 10));
        assert_eq!(parse_size("100"), Some(100));
        assert_eq!(parse_size("1TB"), None);
        assert_eq!(parse_size("MiB"), None);
    }

    #[test]
    fn weights() {
        assert_eq!(parse_weight(&toml::Value::Integer(3)), Ok(Weight::integer(3)));
        assert_eq!(parse_weight(&toml::Value::Float(0.25)), Ok(Weight::new(1, 4).unwrap()));
        assert_eq!(parse_weight(&toml::Value::String("2/3".into())), Ok(Weight::new(2, 3).unwrap()));
        assert!(parse_weight(&toml::Value::Integer(-1)).is_err());
    }
}
