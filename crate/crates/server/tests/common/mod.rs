#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use chrono::Utc;
use reqwest::blocking::{multipart, Client, Response};
use reqwest::StatusCode;
use sae_core::archive::pack_tree;
use sae_core::sandbox::{BundleStore, NullBackend, ProcessBackend, ProcessBackendConfig, SandboxBackend, ScriptedRun};
use sae_server::auth::{put_user, Role};
use sae_server::{Config, Platform};
use serde_json::{json, Value};

pub const SLOTS: [&str; 5] = ["data_io", "orf_finder", "sequences", "transcription", "translation"];

pub fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture_task() -> PathBuf {
    repo().join("fixtures/tasks/orf-finder")
}

pub fn solution(name: &str) -> BTreeMap<String, Vec<u8>> {
    let dir = repo().join("fixtures/solutions/orf-finder").join(name);
    SLOTS.iter().map(|s| (s.to_string(), fs::read(dir.join(format!("{s}.py"))).unwrap())).collect()
}

/// A scratch directory that sandboxed uids can traverse. Removed on drop.
pub struct Scratch(pub PathBuf);

impl Scratch {
    pub fn new() -> Self {
        let dir = std::env::temp_dir().join(format!("sae-api-{}", uuid::Uuid::now_v7().simple()));
        fs::create_dir_all(&dir).unwrap();
        Scratch(dir)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

pub fn config(dir: &Path) -> Config {
    let mut c = Config::new(dir.join("data"), Utc::now().date_naive());
    c.scheduler.reap_interval = 0.05;
    c
}

pub fn process_backend(dir: &Path, bundles: Option<&Path>) -> Arc<dyn SandboxBackend> {
    let bundles = bundles.map(BundleStore::new).unwrap_or_else(BundleStore::empty);
    Arc::new(
        ProcessBackend::new(ProcessBackendConfig { work_root: dir.join("boxes"), bundles, ..Default::default() })
            .unwrap(),
    )
}

/// Answers every run with the fixture's expected output for its stdin, so
/// submissions pass without spawning anything.
pub fn echo_expected_backend() -> NullBackend {
    let mut answers = BTreeMap::new();
    for k in 1..=5 {
        let dir = fixture_task().join("tests");
        answers.insert(fs::read(dir.join(format!("{k}.in"))).unwrap(), fs::read(dir.join(format!("{k}.out"))).unwrap());
    }
    NullBackend::new(move |inv| match answers.get(inv.stdin) {
        Some(out) => ScriptedRun::ok(out.clone()),
        None => ScriptedRun::ok("?"),
    })
}

pub struct TestServer {
    pub platform: Arc<Platform>,
    pub base: String,
    pub client: Client,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl TestServer {
    pub fn start(config: Config, backend: Arc<dyn SandboxBackend>) -> TestServer {
        let platform = Platform::open(config, backend).unwrap();
        TestServer::serve(platform)
    }

    pub fn serve(platform: Arc<Platform>) -> TestServer {
        let store = platform.store();
        put_user(store, "teacher", Role::Teacher, "teach").unwrap();
        for s in ["alice", "bob", "carol", "dave"] {
            put_user(store, s, Role::Student, &format!("{s}-pw")).unwrap();
        }
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let p = platform.clone();
        let thread = thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                sae_server::serve(p, listener, async {
                    let _ = stopped.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        let client = Client::builder().timeout(Duration::from_secs(60)).build().unwrap();
        TestServer { platform, base: format!("http://{addr}"), client, stop: Some(stop), thread: Some(thread) }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn login(&self, user: &str) -> String {
        let password = if user == "teacher" { "teach".to_string() } else { format!("{user}-pw") };
        let resp = self
            .client
            .post(self.url("/api/login"))
            .json(&json!({"user_id": user, "password": password}))
            .send()
            .unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        resp.json::<Value>().unwrap()["token"].as_str().unwrap().to_string()
    }

    pub fn get(&self, token: &str, path: &str) -> Response {
        self.client.get(self.url(path)).bearer_auth(token).send().unwrap()
    }

    pub fn get_json(&self, token: &str, path: &str) -> Value {
        let resp = self.get(token, path);
        assert!(resp.status().is_success(), "GET {path}: {}", resp.status());
        resp.json().unwrap()
    }

    pub fn post_json(&self, token: &str, path: &str, body: &Value) -> Response {
        self.client.post(self.url(path)).bearer_auth(token).json(body).send().unwrap()
    }

    pub fn submit(&self, token: &str, task: &str, files: &BTreeMap<String, Vec<u8>>, language: &str) -> Response {
        let mut form = multipart::Form::new().text("language", language.to_string());
        for (slot, data) in files {
            form = form.part(slot.clone(), multipart::Part::bytes(data.clone()).file_name(format!("{slot}.py")));
        }
        self.client
            .post(self.url(&format!("/api/tasks/{task}/submissions")))
            .bearer_auth(token)
            .multipart(form)
            .send()
            .unwrap()
    }

    /// Submits and returns the new id, asserting 201.
    pub fn submit_ok(&self, token: &str, task: &str, files: &BTreeMap<String, Vec<u8>>) -> String {
        let resp = self.submit(token, task, files, "python3");
        assert_eq!(resp.status(), StatusCode::CREATED);
        let v: Value = resp.json().unwrap();
        assert_eq!(v["status"], "queued");
        v["submission_id"].as_str().unwrap().to_string()
    }

    pub fn upload_task(&self, token: &str, dir: &Path) -> Response {
        let body = pack_tree(dir).unwrap();
        self.client
            .post(self.url("/api/admin/tasks"))
            .bearer_auth(token)
            .header("content-type", "application/x-tar")
            .body(body)
            .send()
            .unwrap()
    }

    /// Polls until the submission is evaluated or failed.
    pub fn wait_settled(&self, token: &str, id: &str, timeout: Duration) -> Value {
        let start = Instant::now();
        loop {
            let v = self.get_json(token, &format!("/api/submissions/{id}"));
            if v["status"] == "evaluated" || v["status"] == "internal_error" {
                return v;
            }
            assert!(start.elapsed() < timeout, "submission {id} still {} after {timeout:?}", v["status"]);
            thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.platform.shutdown();
    }
}

/// Writes a task directory from a manifest and named files.
pub fn write_task(dir: &Path, manifest: &str, files: &[(&str, &str)]) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("task.toml"), manifest).unwrap();
    for (name, content) in files {
        let path = dir.join(name);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, content).unwrap();
    }
    dir.to_path_buf()
}
