//! `sae`: run the service, manage its data directory and dry-run
//! evaluations while writing tasks.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O or runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use sae_core::evaluator::{evaluate, EvaluationPlan};
use sae_core::manifest::{import_task, load_task_dir, ManifestError};
use sae_core::materials::{add_material, course_state, set_course_day, MaterialCategory};
use sae_core::sandbox::{pack_bundle_dir, BundleStore, ProcessBackend, ProcessBackendConfig};
use sae_core::scheduler::load_persisted;
use sae_core::store::Store;
use sae_core::worker::WorkerOptions;
use sae_server::auth::{put_user, users, Role};
use sae_server::config::ConfigError;
use sae_server::platform::{backend_from_config, store_dir};
use sae_server::remote::spawn_remote_worker;
use sae_server::{Config, Platform};
use tracing::info;

#[derive(Parser)]
#[command(name = "sae", version, about = "Code submission and automated evaluation service")]
struct Cli {
    /// Service configuration file.
    #[arg(long, short, global = true, env = "SAE_CONFIG", default_value = "sae.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the API, scheduler and in-process workers.
    Serve,
    /// Import, validate and list tasks.
    #[command(subcommand)]
    Task(TaskCommand),
    /// Evaluate a solution directory against a task directory without the
    /// service and print the report as JSON.
    EvalLocal(EvalLocal),
    /// Manage accounts.
    #[command(subcommand)]
    User(UserCommand),
    /// List workers or run a remote worker.
    #[command(subcommand)]
    Worker(WorkerCommand),
    /// Show or pin the course day.
    #[command(subcommand)]
    Day(DayCommand),
    /// Publish course materials.
    #[command(subcommand)]
    Material(MaterialCommand),
    /// Pack dependency bundles.
    #[command(subcommand)]
    Bundle(BundleCommand),
}

#[derive(Subcommand)]
enum TaskCommand {
    /// Validate and store a task directory (re-importing updates it).
    Import { dir: PathBuf },
    /// Check a task directory without touching the store.
    Validate { dir: PathBuf },
    /// List stored tasks.
    List,
}

#[derive(Args)]
struct EvalLocal {
    task_dir: PathBuf,
    /// Directory holding one file per slot, named `<slot><extension>`.
    solution_dir: PathBuf,
    #[arg(long)]
    language: String,
    /// Directory of packed dependency bundles.
    #[arg(long)]
    bundles: Option<PathBuf>,
}

#[derive(Subcommand)]
enum UserCommand {
    /// Create a user or reset their role and password.
    Add {
        user_id: String,
        #[arg(long, default_value = "student")]
        role: Role,
        /// Read from standard input when omitted.
        #[arg(long)]
        password: Option<String>,
    },
    List,
}

#[derive(Subcommand)]
enum WorkerCommand {
    /// Workers as last persisted by the service.
    List,
    /// Evaluate jobs for a service running elsewhere.
    Run(RemoteWorker),
}

#[derive(Args)]
struct RemoteWorker {
    /// Base URL of the service, e.g. http://10.0.0.5:8080
    #[arg(long)]
    connect: String,
    #[arg(long, env = "SAE_WORKER_TOKEN")]
    token: String,
    /// Local store for fetched task and submission files; sandboxes are
    /// created below it too.
    #[arg(long)]
    cache_dir: PathBuf,
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    pool: Option<String>,
    #[arg(long)]
    bundles: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DayCommand {
    /// Show the current course day.
    Show,
    /// Override the course day; `none` returns to the calendar.
    Set { day: String },
}

#[derive(Subcommand)]
enum MaterialCommand {
    Add {
        material_id: String,
        file: PathBuf,
        #[arg(long)]
        title: String,
        #[arg(long, default_value_t = 0)]
        unlock_day: u32,
        #[arg(long, default_value = "data")]
        category: MaterialCategory,
    },
}

#[derive(Subcommand)]
enum BundleCommand {
    /// Pack a bundle source directory (bundle.toml plus files/) into
    /// `<out-dir>/<id>.tar`.
    Pack { src: PathBuf, out_dir: PathBuf },
}

/// A problem with the user's input rather than with the system.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Invalid(String);

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level =
        if matches!(cli.command, Command::Serve | Command::Worker(WorkerCommand::Run(_))) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .with_writer(std::io::stderr)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(Invalid(msg)) = e.downcast_ref::<Invalid>() {
                eprintln!("{msg}");
                ExitCode::from(1)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Serve => serve(&load_config(&cli.config)?),
        Command::Task(TaskCommand::Validate { dir }) => validate(&dir),
        Command::Task(TaskCommand::Import { dir }) => {
            let store = open_store(&cli.config)?;
            let imported = import_task(&store, &dir).map_err(|e| manifest_error(&dir, e))?;
            println!("{} revision {} ({} new files)", imported.task_id, imported.revision, imported.new_blobs);
            Ok(())
        }
        Command::Task(TaskCommand::List) => {
            let store = open_store(&cli.config)?;
            for t in store.tasks()? {
                println!("{}\tday {}\t{} cases\t{}", t.task_id, t.unlock_day, t.test_cases.len(), t.title);
            }
            Ok(())
        }
        Command::EvalLocal(args) => eval_local(&args),
        Command::User(UserCommand::Add { user_id, role, password }) => {
            let store = open_store(&cli.config)?;
            let password = match password {
                Some(p) => p,
                None => {
                    let mut line = String::new();
                    std::io::stdin().read_line(&mut line).context("cannot read password")?;
                    line.trim_end_matches(['\r', '\n']).to_string()
                }
            };
            if password.is_empty() {
                return Err(invalid("password must not be empty"));
            }
            if !sae_server::auth::valid_user_id(&user_id) {
                return Err(invalid(format!("invalid user id {user_id:?}")));
            }
            put_user(&store, &user_id, role, &password)?;
            println!("{user_id} ({})", role_name(role));
            Ok(())
        }
        Command::User(UserCommand::List) => {
            let store = open_store(&cli.config)?;
            for u in users(&store)? {
                println!("{}\t{}", u.user_id, role_name(u.role));
            }
            Ok(())
        }
        Command::Worker(WorkerCommand::List) => {
            let store = open_store(&cli.config)?;
            let (_, workers) = load_persisted(&store)?;
            for w in workers {
                println!(
                    "{}\t{:?}\t{:?}\tcompleted {}\t{}",
                    w.worker_id,
                    w.admin_state,
                    w.liveness,
                    w.completed_count,
                    w.current_job.as_deref().unwrap_or("-")
                );
            }
            Ok(())
        }
        Command::Worker(WorkerCommand::Run(args)) => remote_worker(&args),
        Command::Day(DayCommand::Show) => {
            let config = load_config(&cli.config)?;
            let store = Store::open(store_dir(&config))?;
            let calendar = sae_core::materials::CourseCalendar {
                start_date: config.course.start_date,
                course_end: config.course.end,
                day_override: course_state(&store)?.day_override,
            };
            let over = calendar.day_override.map_or(String::new(), |_| " (override)".into());
            println!("day {}{over}", calendar.current_day(Utc::now()));
            Ok(())
        }
        Command::Day(DayCommand::Set { day }) => {
            let day = match day.as_str() {
                "none" => None,
                n => Some(n.parse::<u32>().map_err(|_| invalid(format!("day must be a number or none, not {n:?}")))?),
            };
            set_course_day(&open_store(&cli.config)?, day)?;
            match day {
                Some(d) => println!("course day set to {d}"),
                None => println!("course day follows the calendar"),
            }
            Ok(())
        }
        Command::Material(MaterialCommand::Add { material_id, file, title, unlock_day, category }) => {
            let store = open_store(&cli.config)?;
            let data = fs::read(&file).with_context(|| format!("cannot read {}", file.display()))?;
            let name =
                file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| material_id.clone());
            let m = add_material(&store, &material_id, &title, &name, &data, unlock_day, category)
                .map_err(|e| invalid(e.to_string()))?;
            println!("{} unlocks on day {}", m.material_id, m.unlock_day);
            Ok(())
        }
        Command::Bundle(BundleCommand::Pack { src, out_dir }) => {
            fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
            let path = pack_bundle_dir(&src, &out_dir).map_err(|e| invalid(e.to_string()))?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Student => "student",
        Role::Teacher => "teacher",
    }
}

fn load_config(path: &Path) -> anyhow::Result<Config> {
    match Config::load(path) {
        Ok(c) => Ok(c),
        Err(e @ ConfigError::Invalid { .. }) => Err(invalid(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

fn open_store(config: &Path) -> anyhow::Result<Store> {
    let config = load_config(config)?;
    let dir = store_dir(&config);
    Store::open(&dir).with_context(|| format!("cannot open store at {}", dir.display()))
}

fn manifest_error(dir: &Path, e: ManifestError) -> anyhow::Error {
    match e {
        ManifestError::Invalid(lines) => {
            invalid(lines.iter().map(|l| format!("{}/{l}", dir.display())).collect::<Vec<_>>().join("\n"))
        }
        other => other.into(),
    }
}

fn validate(dir: &Path) -> anyhow::Result<()> {
    let loaded = load_task_dir(dir).map_err(|e| manifest_error(dir, e))?;
    let t = &loaded.spec;
    println!(
        "{}: ok, {} slots, {} cases, max score {}",
        t.task_id,
        t.file_slots.len(),
        t.test_cases.len(),
        t.max_score
    );
    Ok(())
}

fn serve(config: &Config) -> anyhow::Result<()> {
    let backend = backend_from_config(config)?;
    let platform = Platform::open(config.clone(), backend)?;
    let workers = platform.start_workers(config.workers)?;
    info!(workers = workers.len(), "workers started");
    let rt = tokio::runtime::Runtime::new()?;
    let result = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.listen)
            .await
            .with_context(|| format!("cannot listen on {}", config.listen))?;
        sae_server::serve(platform.clone(), listener, async {
            let _ = tokio::signal::ctrl_c().await;
            info!("shutting down");
        })
        .await
        .context("server failed")
    });
    platform.shutdown();
    result
}

fn scratch_dir(prefix: &str) -> anyhow::Result<PathBuf> {
    // sandbox users must be able to traverse it, so no private tempdir
    let dir = std::env::temp_dir().join(format!("{prefix}-{}-{}", std::process::id(), Utc::now().timestamp_micros()));
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn eval_local(args: &EvalLocal) -> anyhow::Result<()> {
    let scratch = scratch_dir("sae-eval")?;
    let result = eval_in(args, &scratch);
    let _ = fs::remove_dir_all(&scratch);
    let report = result?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval_in(args: &EvalLocal, scratch: &Path) -> anyhow::Result<sae_core::model::EvaluationReport> {
    let store = Store::open(scratch.join("store"))?;
    let imported = import_task(&store, &args.task_dir).map_err(|e| manifest_error(&args.task_dir, e))?;
    let task = store.task(&imported.task_id)?;
    let Some(language) = task.language(&args.language) else {
        let known: Vec<_> = task.languages.iter().map(|l| l.profile_id.as_str()).collect();
        return Err(invalid(format!(
            "task {} has no language {:?} (known: {})",
            task.task_id,
            args.language,
            known.join(", ")
        )));
    };
    let mut files = BTreeMap::new();
    let mut missing = Vec::new();
    for slot in &task.file_slots {
        let path = args.solution_dir.join(language.file_name(slot));
        match fs::read(&path) {
            Ok(data) => {
                files.insert(slot.clone(), data);
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => missing.push(path.display().to_string()),
            Err(e) => return Err(e).with_context(|| format!("cannot read {}", path.display())),
        }
    }
    if !missing.is_empty() {
        return Err(invalid(format!("missing solution files: {}", missing.join(", "))));
    }
    let sub = store.create_submission("local", "local", &task.task_id, &args.language, &files, Utc::now())?;
    let bundles = args.bundles.clone().map(BundleStore::new).unwrap_or_else(BundleStore::empty);
    let backend =
        ProcessBackend::new(ProcessBackendConfig { work_root: scratch.join("boxes"), bundles, ..Default::default() })?;
    let plan = EvaluationPlan::new(&task, &sub).map_err(|e| invalid(e.reason))?;
    match evaluate(&plan, &backend, &store, &mut |_| {}) {
        Ok(report) => Ok(report),
        Err(e) => bail!("evaluation failed: {}", e.reason),
    }
}

fn remote_worker(args: &RemoteWorker) -> anyhow::Result<()> {
    let cache = Arc::new(Store::open(args.cache_dir.join("store"))?);
    let bundles = args.bundles.clone().map(BundleStore::new).unwrap_or_else(BundleStore::empty);
    let backend = ProcessBackend::new(ProcessBackendConfig {
        work_root: args.cache_dir.join("sandboxes"),
        bundles,
        ..Default::default()
    })?;
    let id = args.id.clone().unwrap_or_else(|| format!("remote-{}", std::process::id()));
    let mut opts = WorkerOptions::new(id.clone());
    opts.pool = args.pool.clone();
    let handle = spawn_remote_worker(&args.connect, &args.token, cache, Arc::new(backend), opts)?;
    info!(worker_id = %id, service = %args.connect, "worker registered");
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    info!("stopping after the current job");
    handle.stop();
    Ok(())
}
