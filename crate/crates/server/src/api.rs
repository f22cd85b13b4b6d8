//! JSON API for students and teachers. Every timestamp is UTC RFC 3339.

use std::collections::BTreeMap;
use std::path::Path as FsPath;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Extension, Json, Router};
use chrono::{DateTime, SecondsFormat, Utc};
use sae_core::archive::unpack_tree;
use sae_core::manifest::{load_task_dir, store_task, ManifestError, MANIFEST_FILE};
use sae_core::materials::{
    add_material, format_time_left, material, materials, remove_material, set_course_day, visible, Material,
    MaterialCategory,
};
use sae_core::model::{best_score, CaseVerdict, FeedbackVisibility, Submission, SubmissionStatus, TaskSpec};
use sae_core::scheduler::AdminState;
use sae_core::store::StoreError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::error;

use crate::auth::{self, Session};
use crate::platform::{Platform, SubmitError};
use crate::worker_api;

pub type AppState = Arc<Platform>;

/// Largest task archive accepted by the admin import.
const TASK_ARCHIVE_LIMIT: usize = 64 * 1024 * 1024;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, body: json!({ "error": message.into() }) }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.body[key] = serde_json::to_value(value).unwrap_or(Value::Null);
        self
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("{} not found", what.into()))
    }

    pub fn internal(message: impl std::fmt::Display) -> Self {
        error!(error = %message, "request failed");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { kind, id } => ApiError::not_found(format!("{kind} {id:?}")),
            other => ApiError::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

/// Runs store work off the async executor.
pub async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

pub fn rfc3339(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn router(platform: AppState) -> Router {
    let admin = Router::new()
        .route("/api/admin/tasks", get(admin_tasks).post(import_task))
        .route("/api/admin/queue", get(admin_queue))
        .route("/api/admin/workers", get(admin_workers))
        .route("/api/admin/workers/:id/state", post(set_worker_state))
        .route("/api/admin/day", get(get_day).post(set_day))
        .route("/api/admin/submissions", get(admin_submissions))
        .route("/api/admin/users", get(admin_users))
        .route("/api/admin/materials", get(admin_materials).post(upload_material))
        .route("/api/admin/materials/:id", delete(delete_material))
        .route_layer(middleware::from_fn(teacher_only));

    let signed_in = Router::new()
        .route("/api/logout", post(logout))
        .route("/api/me", get(me))
        .route("/api/tasks", get(list_tasks))
        .route("/api/tasks/:id", get(get_task))
        .route("/api/tasks/:id/statement", get(statement))
        .route("/api/tasks/:id/submissions", get(task_submissions).post(submit))
        .route("/api/submissions/:id", get(get_submission))
        .route("/api/submissions/:id/bundle", get(download_bundle))
        .route("/api/materials", get(list_materials))
        .route("/api/materials/:id", get(download_material))
        .merge(admin)
        .route_layer(middleware::from_fn_with_state(platform.clone(), require_session));

    // parts are capped one by one; this bounds the whole request
    let body_cap = usize::try_from(platform.config().upload_limit)
        .unwrap_or(usize::MAX)
        .saturating_mul(32)
        .max(TASK_ARCHIVE_LIMIT);

    Router::new()
        .route("/api/login", post(login))
        .route("/api/time", get(time))
        .merge(signed_in)
        .merge(worker_api::router(platform.clone()))
        .layer(DefaultBodyLimit::max(body_cap))
        .with_state(platform)
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get(header::AUTHORIZATION)?.to_str().ok()?.strip_prefix("Bearer ").map(str::trim)
}

async fn require_session(State(p): State<AppState>, mut req: Request, next: Next) -> Response {
    let Some(token) = bearer(req.headers()) else {
        return ApiError::new(StatusCode::UNAUTHORIZED, "missing bearer token").into_response();
    };
    match p.sessions().get(token, Utc::now()) {
        Some(session) => {
            req.extensions_mut().insert(session);
            next.run(req).await
        }
        None => ApiError::new(StatusCode::UNAUTHORIZED, "invalid or expired token").into_response(),
    }
}

async fn teacher_only(req: Request, next: Next) -> Response {
    match req.extensions().get::<Session>() {
        Some(s) if s.is_teacher() => next.run(req).await,
        _ => ApiError::new(StatusCode::FORBIDDEN, "teacher role required").into_response(),
    }
}

#[derive(Deserialize)]
struct LoginRequest {
    user_id: String,
    password: String,
}

async fn login(State(p): State<AppState>, Json(req): Json<LoginRequest>) -> ApiResult<Json<Value>> {
    let p2 = p.clone();
    let user = blocking(move || Ok(auth::user(p2.store(), &req.user_id)?.filter(|u| u.verify(&req.password)))).await?;
    let user = user.ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "invalid credentials"))?;
    let s = p.sessions().open(&user, Utc::now());
    Ok(Json(json!({
        "token": s.token,
        "user_id": s.user_id,
        "role": s.role,
        "expires_at": rfc3339(s.expires_at),
    })))
}

async fn logout(State(p): State<AppState>, Extension(s): Extension<Session>) -> StatusCode {
    p.sessions().close(&s.token);
    StatusCode::NO_CONTENT
}

async fn me(Extension(s): Extension<Session>) -> Json<Value> {
    Json(json!({ "user_id": s.user_id, "role": s.role, "expires_at": rfc3339(s.expires_at) }))
}

async fn time(State(p): State<AppState>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let now = Utc::now();
        let cal = p.calendar()?;
        let left = cal.time_left(now);
        Ok(Json(json!({
            "server_time": rfc3339(now),
            "course_day": cal.current_day(now),
            "course_end": cal.course_end.map(rfc3339),
            "time_left": left.map(format_time_left),
            "time_left_seconds": left.map(|d| d.num_seconds()),
        })))
    })
    .await
}

#[derive(Serialize)]
struct LanguageView {
    profile_id: String,
    display_name: String,
    file_extension: String,
}

#[derive(Serialize)]
struct TaskView {
    task_id: String,
    title: String,
    unlock_day: u32,
    locked: bool,
    file_slots: Vec<String>,
    languages: Vec<LanguageView>,
    max_score: u32,
    best_score: u32,
    submissions: usize,
    has_statement: bool,
}

fn task_view(task: &TaskSpec, day: u32, own: &[Submission]) -> TaskView {
    TaskView {
        task_id: task.task_id.clone(),
        title: task.title.clone(),
        unlock_day: task.unlock_day,
        locked: task.unlock_day > day,
        file_slots: task.file_slots.clone(),
        languages: task
            .languages
            .iter()
            .map(|l| LanguageView {
                profile_id: l.profile_id.clone(),
                display_name: l.display_name.clone(),
                file_extension: l.file_extension.clone(),
            })
            .collect(),
        max_score: task.max_score,
        best_score: best_score(own),
        submissions: own.len(),
        has_statement: task.statement_ref.is_some(),
    }
}

/// The task as the session may see it: students get 404 for locked tasks.
fn visible_task(p: &Platform, s: &Session, task_id: &str) -> ApiResult<(TaskSpec, u32)> {
    let day = p.current_day(Utc::now())?;
    let task = if s.is_teacher() {
        match p.store().task(task_id) {
            Ok(t) => Some(t),
            Err(StoreError::NotFound { .. }) => None,
            Err(e) => return Err(e.into()),
        }
    } else {
        p.unlocked_task(task_id, day)?
    };
    task.map(|t| (t, day)).ok_or_else(|| ApiError::not_found(format!("task {task_id:?}")))
}

async fn list_tasks(State(p): State<AppState>, Extension(s): Extension<Session>) -> ApiResult<Json<Vec<TaskView>>> {
    blocking(move || {
        let day = p.current_day(Utc::now())?;
        let subs = p.store().submissions()?;
        let mut tasks: Vec<TaskSpec> =
            p.store().tasks()?.into_iter().filter(|t| s.is_teacher() || t.unlock_day <= day).collect();
        tasks.sort_by(|a, b| (a.unlock_day, &a.task_id).cmp(&(b.unlock_day, &b.task_id)));
        let views = tasks
            .iter()
            .map(|t| {
                let own: Vec<Submission> =
                    subs.iter().filter(|x| x.task_id == t.task_id && x.user_id == s.user_id).cloned().collect();
                task_view(t, day, &own)
            })
            .collect();
        Ok(Json(views))
    })
    .await
}

async fn get_task(
    State(p): State<AppState>,
    Extension(s): Extension<Session>,
    Path(id): Path<String>,
) -> ApiResult<Json<TaskView>> {
    blocking(move || {
        let (task, day) = visible_task(&p, &s, &id)?;
        let own = p.store().submissions_for(&s.user_id, &id)?;
        Ok(Json(task_view(&task, day, &own)))
    })
    .await
}

fn content_type(file_name: &str) -> &'static str {
    let ext = FsPath::new(file_name).extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "md" => "text/markdown; charset=utf-8",
        "txt" | "py" | "fa" | "fasta" | "csv" | "tsv" => "text/plain; charset=utf-8",
        "html" | "htm" => "text/html; charset=utf-8",
        "pdf" => "application/pdf",
        "json" => "application/json",
        "zip" => "application/zip",
        "tar" => "application/x-tar",
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        _ => "application/octet-stream",
    }
}

fn file_response(data: Vec<u8>, file_name: &str, inline: bool) -> Response {
    let safe: String =
        file_name.chars().map(|c| if c.is_ascii_graphic() && c != '"' && c != '\\' { c } else { '_' }).collect();
    let disposition = format!("{}; filename=\"{safe}\"", if inline { "inline" } else { "attachment" });
    let mut resp = Response::new(Body::from(data));
    resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type(file_name)));
    if let Ok(v) = HeaderValue::from_str(&disposition) {
        resp.headers_mut().insert(header::CONTENT_DISPOSITION, v);
    }
    resp
}

async fn statement(
    State(p): State<AppState>,
    Extension(s): Extension<Session>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    blocking(move || {
        let (task, _) = visible_task(&p, &s, &id)?;
        let mid = task.statement_ref.ok_or_else(|| ApiError::not_found(format!("statement of task {id:?}")))?;
        let m = material(p.store(), &mid)?.ok_or_else(|| ApiError::not_found(format!("statement of task {id:?}")))?;
        let data = p.store().get_blob(&m.blob)?;
        Ok(file_response(data, &m.file_name, true))
    })
    .await
}

#[derive(Serialize)]
struct CaseView {
    case_id: String,
    verdict: CaseVerdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    message: Option<String>,
    time_used: f64,
    memory_used: u64,
}

#[derive(Serialize)]
pub struct SubmissionView {
    submission_id: String,
    task_id: String,
    user_id: String,
    language: String,
    submitted_at: String,
    status: SubmissionStatus,
    status_label: &'static str,
    files: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_score: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checker_error: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_case: Option<Vec<CaseView>>,
}

/// Shapes a submission for `viewer`. Students never see messages of
/// verdict-only cases; teachers see everything plus the checker-error flag.
fn submission_view(sub: &Submission, task: Option<&TaskSpec>, teacher: bool) -> SubmissionView {
    let report = sub.results.as_ref();
    let per_case = report.map(|r| {
        r.per_case
            .iter()
            .map(|c| {
                let full = task
                    .and_then(|t| t.case(&c.case_id))
                    .is_some_and(|tc| tc.feedback_visibility == FeedbackVisibility::Full);
                CaseView {
                    case_id: c.case_id.clone(),
                    verdict: c.verdict,
                    message: (teacher || full).then(|| c.message.clone()),
                    time_used: c.time_used,
                    memory_used: c.memory_used,
                }
            })
            .collect()
    });
    SubmissionView {
        submission_id: sub.submission_id.clone(),
        task_id: sub.task_id.clone(),
        user_id: sub.user_id.clone(),
        language: sub.language.clone(),
        submitted_at: rfc3339(sub.submitted_at),
        status: sub.status,
        status_label: sub.status.label(),
        files: sub.files.keys().cloned().collect(),
        score: report.map(|r| r.score),
        max_score: report.map(|r| r.max_score).or(task.map(|t| t.max_score)),
        failure: sub.failure.clone(),
        checker_error: teacher.then(|| report.is_some_and(|r| r.has_checker_error())),
        per_case,
    }
}

/// Other users' submissions are reported as missing.
fn own_submission(p: &Platform, s: &Session, id: &str) -> ApiResult<Submission> {
    let missing = || ApiError::not_found(format!("submission {id:?}"));
    let sub = match p.store().submission(id) {
        Ok(sub) => sub,
        Err(StoreError::NotFound { .. }) => return Err(missing()),
        // malformed ids are just unknown
        Err(StoreError::Conflict(_)) => return Err(missing()),
        Err(e) => return Err(e.into()),
    };
    if sub.user_id != s.user_id && !s.is_teacher() {
        return Err(missing());
    }
    Ok(sub)
}

async fn get_submission(
    State(p): State<AppState>,
    Extension(s): Extension<Session>,
    Path(id): Path<String>,
) -> ApiResult<Json<SubmissionView>> {
    blocking(move || {
        let sub = own_submission(&p, &s, &id)?;
        let task = p.store().task(&sub.task_id).ok();
        Ok(Json(submission_view(&sub, task.as_ref(), s.is_teacher())))
    })
    .await
}

async fn download_bundle(
    State(p): State<AppState>,
    Extension(s): Extension<Session>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    blocking(move || {
        let sub = own_submission(&p, &s, &id)?;
        let data = p.store().bundle_submission(&sub.submission_id)?;
        Ok(file_response(data, &format!("{}-{}.tar", sub.task_id, sub.submission_id), false))
    })
    .await
}

async fn task_submissions(
    State(p): State<AppState>,
    Extension(s): Extension<Session>,
    Path(id): Path<String>,
) -> ApiResult<Json<Vec<SubmissionView>>> {
    blocking(move || {
        let (task, _) = visible_task(&p, &s, &id)?;
        let mut subs = p.store().submissions_for(&s.user_id, &id)?;
        subs.reverse();
        Ok(Json(subs.iter().map(|x| submission_view(x, Some(&task), s.is_teacher())).collect()))
    })
    .await
}

fn unprocessable(message: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, message)
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    let status = e.status();
    let status = if status == StatusCode::PAYLOAD_TOO_LARGE { status } else { StatusCode::BAD_REQUEST };
    ApiError::new(status, e.body_text())
}

/// Reads one part, keeping at most `cap` bytes. Returns `None` when the
/// part is larger; the rest of it is still consumed so the client gets a
/// clean response rather than a reset connection.
async fn read_capped(field: &mut axum::extract::multipart::Field<'_>, cap: u64) -> ApiResult<Option<Vec<u8>>> {
    let mut data = Vec::new();
    let mut over = false;
    while let Some(chunk) = field.chunk().await.map_err(multipart_error)? {
        if over || data.len() as u64 + chunk.len() as u64 > cap {
            over = true;
            data.clear();
            continue;
        }
        data.extend_from_slice(&chunk);
    }
    Ok((!over).then_some(data))
}

async fn submit(
    State(p): State<AppState>,
    Extension(s): Extension<Session>,
    Path(id): Path<String>,
    mut form: Multipart,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let p2 = p.clone();
    let s2 = s.clone();
    let (task, _) = blocking(move || visible_task(&p2, &s2, &id)).await?;
    let cap = p.config().upload_limit;

    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut language: Option<String> = None;
    let mut problem: Option<ApiError> = None;
    while let Some(mut field) = form.next_field().await.map_err(multipart_error)? {
        let name = field.name().unwrap_or_default().to_string();
        let data = read_capped(&mut field, cap).await?;
        if problem.is_some() {
            continue;
        }
        problem = match data {
            None => Some(
                ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, format!("part {name:?} exceeds the {cap} byte limit"))
                    .with("slot", &name),
            ),
            Some(bytes) if name == "language" => {
                language = Some(String::from_utf8_lossy(&bytes).trim().to_string());
                None
            }
            Some(_) if !task.file_slots.contains(&name) => {
                Some(unprocessable(format!("unknown part {name:?}; expected the task's slots")).with("slot", &name))
            }
            Some(_) if files.contains_key(&name) => {
                Some(unprocessable(format!("slot {name:?} was sent twice")).with("slot", &name))
            }
            Some(bytes) => {
                files.insert(name, bytes);
                None
            }
        };
    }
    if let Some(e) = problem {
        return Err(e);
    }
    if let Some(missing) = task.file_slots.iter().find(|slot| !files.contains_key(*slot)) {
        let all: Vec<&String> = task.file_slots.iter().filter(|slot| !files.contains_key(*slot)).collect();
        return Err(unprocessable(format!("missing file for slot {missing:?}"))
            .with("slot", missing)
            .with("missing_slots", all));
    }
    let language = language.ok_or_else(|| unprocessable("missing field \"language\"").with("field", "language"))?;
    if task.language(&language).is_none() {
        let known: Vec<&str> = task.languages.iter().map(|l| l.profile_id.as_str()).collect();
        return Err(unprocessable(format!("unknown language {language:?}"))
            .with("field", "language")
            .with("language", &language)
            .with("languages", known));
    }

    let sub = blocking(move || {
        p.submit(&s.user_id, &task, &language, &files).map_err(|e| match e {
            SubmitError::Store(e) => ApiError::from(e),
            other => ApiError::internal(other),
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(json!({ "submission_id": sub.submission_id, "status": sub.status }))))
}

#[derive(Serialize)]
struct MaterialView {
    material_id: String,
    title: String,
    file_name: String,
    unlock_day: u32,
    category: MaterialCategory,
    size: u64,
}

fn material_view(m: &Material) -> MaterialView {
    MaterialView {
        material_id: m.material_id.clone(),
        title: m.title.clone(),
        file_name: m.file_name.clone(),
        unlock_day: m.unlock_day,
        category: m.category,
        size: m.blob.size,
    }
}

async fn list_materials(
    State(p): State<AppState>,
    Extension(s): Extension<Session>,
) -> ApiResult<Json<Vec<MaterialView>>> {
    blocking(move || {
        let day = if s.is_teacher() { u32::MAX } else { p.current_day(Utc::now())? };
        let all = materials(p.store())?;
        Ok(Json(visible(&all, day).iter().map(material_view).collect()))
    })
    .await
}

/// Locked materials are indistinguishable from unknown ones for students.
async fn download_material(
    State(p): State<AppState>,
    Extension(s): Extension<Session>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    blocking(move || {
        let day = if s.is_teacher() { u32::MAX } else { p.current_day(Utc::now())? };
        let m = material(p.store(), &id)
            .ok()
            .flatten()
            .filter(|m| m.unlock_day <= day)
            .ok_or_else(|| ApiError::not_found(format!("material {id:?}")))?;
        let data = p.store().get_blob(&m.blob)?;
        Ok(file_response(data, &m.file_name, false))
    })
    .await
}

// ---- admin ----

async fn admin_tasks(State(p): State<AppState>) -> ApiResult<Json<Vec<TaskSpec>>> {
    blocking(move || Ok(Json(p.store().tasks()?))).await
}

/// Finds the task directory inside an unpacked upload: the root itself or
/// its single subdirectory.
fn task_root(dir: &FsPath) -> std::io::Result<std::path::PathBuf> {
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(dir.to_path_buf());
    }
    let subdirs: Vec<_> =
        std::fs::read_dir(dir)?.filter_map(Result::ok).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    match subdirs.as_slice() {
        [only] => Ok(only.clone()),
        _ => Ok(dir.to_path_buf()),
    }
}

async fn import_task(State(p): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    blocking(move || {
        let tmp = tempfile::tempdir().map_err(ApiError::internal)?;
        unpack_tree(&body, tmp.path()).map_err(|e| unprocessable(format!("unreadable task archive: {e}")))?;
        let root = task_root(tmp.path()).map_err(ApiError::internal)?;
        let invalid = |lines: Vec<String>| unprocessable("task manifest is invalid").with("violations", lines);
        let loaded = match load_task_dir(&root) {
            Ok(l) => l,
            Err(ManifestError::Invalid(lines)) => return Err(invalid(lines)),
            Err(ManifestError::Io { path, source }) => {
                let rel = path.strip_prefix(&root).unwrap_or(&path).display().to_string();
                return Err(invalid(vec![format!("{rel}: {source}")]));
            }
            Err(e) => return Err(ApiError::internal(e)),
        };
        let imported = store_task(p.store(), loaded).map_err(|e| match e {
            ManifestError::Invalid(lines) => invalid(lines),
            other => ApiError::internal(other),
        })?;
        Ok((
            StatusCode::CREATED,
            Json(json!({
                "task_id": imported.task_id,
                "revision": imported.revision,
                "new_blobs": imported.new_blobs,
            })),
        ))
    })
    .await
}

async fn admin_queue(State(p): State<AppState>) -> Json<Value> {
    Json(serde_json::to_value(p.scheduler().snapshot()).unwrap_or(Value::Null))
}

async fn admin_workers(State(p): State<AppState>) -> Json<Value> {
    Json(serde_json::to_value(p.scheduler().snapshot().workers).unwrap_or(Value::Null))
}

#[derive(Deserialize)]
struct WorkerStateRequest {
    state: AdminState,
}

async fn set_worker_state(
    State(p): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<WorkerStateRequest>,
) -> ApiResult<Json<Value>> {
    blocking(move || {
        let rec = p.scheduler().set_worker_state(&id, req.state).map_err(worker_api::scheduler_error)?;
        Ok(Json(serde_json::to_value(rec).map_err(ApiError::internal)?))
    })
    .await
}

fn day_json(p: &Platform) -> ApiResult<Json<Value>> {
    let cal = p.calendar()?;
    Ok(Json(json!({
        "course_day": cal.current_day(Utc::now()),
        "day_override": cal.day_override,
        "start_date": cal.start_date,
    })))
}

async fn get_day(State(p): State<AppState>) -> ApiResult<Json<Value>> {
    blocking(move || day_json(&p)).await
}

#[derive(Deserialize)]
struct DayRequest {
    /// `null` returns to the calendar.
    day: Option<u32>,
}

async fn set_day(State(p): State<AppState>, Json(req): Json<DayRequest>) -> ApiResult<Json<Value>> {
    blocking(move || {
        set_course_day(p.store(), req.day)?;
        day_json(&p)
    })
    .await
}

#[derive(Deserialize)]
struct SubmissionFilter {
    task_id: Option<String>,
    user_id: Option<String>,
    status: Option<SubmissionStatus>,
}

async fn admin_submissions(
    State(p): State<AppState>,
    Query(f): Query<SubmissionFilter>,
) -> ApiResult<Json<Vec<SubmissionView>>> {
    blocking(move || {
        let tasks: BTreeMap<String, TaskSpec> =
            p.store().tasks()?.into_iter().map(|t| (t.task_id.clone(), t)).collect();
        let mut subs: Vec<Submission> = p
            .store()
            .submissions()?
            .into_iter()
            .filter(|s| f.task_id.as_ref().is_none_or(|t| &s.task_id == t))
            .filter(|s| f.user_id.as_ref().is_none_or(|u| &s.user_id == u))
            .filter(|s| f.status.is_none_or(|st| s.status == st))
            .collect();
        subs.reverse();
        Ok(Json(subs.iter().map(|s| submission_view(s, tasks.get(&s.task_id), true)).collect()))
    })
    .await
}

async fn admin_users(State(p): State<AppState>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let users: Vec<Value> =
            auth::users(p.store())?.iter().map(|u| json!({ "user_id": u.user_id, "role": u.role })).collect();
        Ok(Json(Value::Array(users)))
    })
    .await
}

async fn admin_materials(State(p): State<AppState>) -> ApiResult<Json<Vec<MaterialView>>> {
    blocking(move || {
        let all = materials(p.store())?;
        Ok(Json(visible(&all, u32::MAX).iter().map(material_view).collect()))
    })
    .await
}

async fn upload_material(
    State(p): State<AppState>,
    mut form: Multipart,
) -> ApiResult<(StatusCode, Json<MaterialView>)> {
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut file: Option<(String, Vec<u8>)> = None;
    while let Some(mut field) = form.next_field().await.map_err(multipart_error)? {
        let name = field.name().unwrap_or_default().to_string();
        if name == "file" {
            let file_name = field.file_name().unwrap_or("material").to_string();
            let data = read_capped(&mut field, TASK_ARCHIVE_LIMIT as u64)
                .await?
                .ok_or_else(|| ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "material file too large"))?;
            file = Some((file_name, data));
        } else {
            let data = read_capped(&mut field, 4096).await?.ok_or_else(|| unprocessable(format!("{name} too long")))?;
            fields.insert(name, String::from_utf8_lossy(&data).trim().to_string());
        }
    }
    let (file_name, data) = file.ok_or_else(|| unprocessable("missing part \"file\"").with("field", "file"))?;
    let material_id = match fields.get("material_id") {
        Some(id) => id.clone(),
        None => FsPath::new(&file_name).file_stem().and_then(|s| s.to_str()).unwrap_or("material").to_string(),
    };
    let title = fields.get("title").cloned().unwrap_or_else(|| file_name.clone());
    let unlock_day = match fields.get("unlock_day") {
        Some(d) => d.parse::<u32>().map_err(|_| unprocessable(format!("bad unlock_day {d:?}")))?,
        None => 0,
    };
    let category = match fields.get("category") {
        Some(c) => c.parse::<MaterialCategory>().map_err(unprocessable)?,
        None => MaterialCategory::Data,
    };
    blocking(move || {
        let m = add_material(p.store(), &material_id, &title, &file_name, &data, unlock_day, category).map_err(
            |e| match e {
                StoreError::Conflict(msg) => unprocessable(msg),
                other => other.into(),
            },
        )?;
        Ok((StatusCode::CREATED, Json(material_view(&m))))
    })
    .await
}

async fn delete_material(State(p): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    blocking(move || match remove_material(p.store(), &id) {
        Ok(true) => Ok(StatusCode::NO_CONTENT),
        Ok(false) | Err(StoreError::Conflict(_)) => Err(ApiError::not_found(format!("material {id:?}"))),
        Err(e) => Err(e.into()),
    })
    .await
}
