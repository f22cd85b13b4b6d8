#![allow(dead_code)]

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use sae_core::sandbox::{BundleStore, ProcessBackend, ProcessBackendConfig, SandboxPolicy};

/// A work root below the system temp dir that sandboxed uids can traverse.
/// Removed on drop.
pub struct BoxRoot(pub PathBuf);

impl BoxRoot {
    pub fn new() -> Self {
        let dir = std::env::temp_dir().join(format!("sae-test-{}", uuid::Uuid::now_v7().simple()));
        fs::create_dir_all(&dir).unwrap();
        BoxRoot(dir)
    }
}

impl Drop for BoxRoot {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

pub fn backend(root: &BoxRoot) -> ProcessBackend {
    backend_with_bundles(root, BundleStore::empty())
}

pub fn backend_with_bundles(root: &BoxRoot, bundles: BundleStore) -> ProcessBackend {
    ProcessBackend::new(ProcessBackendConfig { work_root: root.0.join("boxes"), bundles, ..Default::default() })
        .unwrap()
}

/// A world-readable directory, so bind mounts work for dropped uids.
pub fn public_dir(path: &Path) -> PathBuf {
    fs::create_dir_all(path).unwrap();
    fs::set_permissions(path, fs::Permissions::from_mode(0o755)).unwrap();
    path.to_path_buf()
}

pub fn policy(cpu: f64) -> SandboxPolicy {
    SandboxPolicy { cpu_time_limit: cpu, ..Default::default() }
}

pub fn py(code: &str) -> Vec<String> {
    vec!["python3".into(), "-c".into(), code.into()]
}
