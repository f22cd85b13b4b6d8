//! Dependency bundles: pre-built tar archives staged into a sandbox.
//!
//! Layout of `<bundles_dir>/<id>.tar`:
//!
//! ```text
//! bundle.toml        id, install_path, optional [env] table
//! files/...          unpacked below <sandbox>/<install_path>
//! ```
//!
//! Values in `[env]` may use `{install}`, which expands to the absolute
//! install directory. When several bundles set the same variable the values
//! are joined with `:`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{relative_inside, SandboxError};
use crate::archive::append_file;

pub const BUNDLE_MANIFEST: &str = "bundle.toml";
const FILES_PREFIX: &str = "files";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub id: String,
    pub install_path: String,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default)]
pub struct BundleStore {
    dir: Option<PathBuf>,
}

impl BundleStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        BundleStore { dir: Some(dir.into()) }
    }

    /// A store with no bundles; every lookup fails.
    pub fn empty() -> Self {
        BundleStore { dir: None }
    }

    fn archive_path(&self, id: &str) -> Result<PathBuf, SandboxError> {
        let valid = !id.is_empty()
            && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
            && !id.starts_with('.');
        let dir = self.dir.as_ref().filter(|_| valid).ok_or_else(|| SandboxError::UnknownBundle(id.into()))?;
        let path = dir.join(format!("{id}.tar"));
        if path.is_file() {
            Ok(path)
        } else {
            Err(SandboxError::UnknownBundle(id.into()))
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.archive_path(id).is_ok()
    }

    pub fn manifest(&self, id: &str) -> Result<BundleManifest, SandboxError> {
        let path = self.archive_path(id)?;
        let mut archive = tar::Archive::new(fs::File::open(&path)?);
        for entry in archive.entries()? {
            let mut entry = entry?;
            if entry.path()?.as_ref() == Path::new(BUNDLE_MANIFEST) {
                let mut text = String::new();
                entry.read_to_string(&mut text)?;
                return parse_manifest(id, &text);
            }
        }
        Err(invalid(id, "missing bundle.toml"))
    }

    /// Unpacks the bundle below `root` and returns its manifest together
    /// with the absolute install directory.
    pub fn stage(&self, id: &str, root: &Path) -> Result<(BundleManifest, PathBuf), SandboxError> {
        let manifest = self.manifest(id)?;
        let rel = relative_inside(&manifest.install_path)
            .ok_or_else(|| invalid(id, format!("bad install_path {:?}", manifest.install_path)))?;
        let install = root.join(rel);
        fs::create_dir_all(&install)?;
        let mut archive = tar::Archive::new(fs::File::open(self.archive_path(id)?)?);
        archive.set_preserve_permissions(false);
        for entry in archive.entries()? {
            let mut entry = entry?;
            let path = entry.path()?.into_owned();
            let Ok(inner) = path.strip_prefix(FILES_PREFIX) else {
                continue;
            };
            if inner.as_os_str().is_empty() {
                continue;
            }
            if !inner.components().all(|c| matches!(c, Component::Normal(_))) {
                return Err(invalid(id, format!("entry {} escapes the install directory", path.display())));
            }
            let kind = entry.header().entry_type();
            let target = install.join(inner);
            if kind.is_dir() {
                fs::create_dir_all(&target)?;
            } else if kind.is_file() {
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent)?;
                }
                entry.unpack(&target)?;
            } else {
                return Err(invalid(id, format!("entry {} is not a regular file", path.display())));
            }
        }
        Ok((manifest, install))
    }
}

fn invalid(id: &str, reason: impl Into<String>) -> SandboxError {
    SandboxError::InvalidBundle { id: id.into(), reason: reason.into() }
}

fn parse_manifest(id: &str, text: &str) -> Result<BundleManifest, SandboxError> {
    let manifest: BundleManifest = toml::from_str(text).map_err(|e| invalid(id, e.to_string()))?;
    if manifest.id != id {
        return Err(invalid(id, format!("manifest declares id {:?}", manifest.id)));
    }
    Ok(manifest)
}

/// Builds a bundle archive from a directory tree. The archive is
/// byte-deterministic for identical input.
pub fn pack_bundle(manifest: &BundleManifest, files_dir: &Path, out: &Path) -> std::io::Result<()> {
    let mut builder = tar::Builder::new(fs::File::create(out)?);
    let text = toml::to_string(manifest).map_err(std::io::Error::other)?;
    append_file(&mut builder, Path::new(BUNDLE_MANIFEST), text.as_bytes())?;
    let mut files = Vec::new();
    collect(files_dir, files_dir, &mut files)?;
    files.sort();
    for rel in files {
        let data = fs::read(files_dir.join(&rel))?;
        append_file(&mut builder, &Path::new(FILES_PREFIX).join(&rel), &data)?;
    }
    builder.into_inner()?.sync_all()
}

/// Packs a source directory holding `bundle.toml` and `files/` into
/// `<out_dir>/<id>.tar`. Returns the archive path.
pub fn pack_bundle_dir(src: &Path, out_dir: &Path) -> Result<PathBuf, SandboxError> {
    let text = fs::read_to_string(src.join(BUNDLE_MANIFEST))?;
    let manifest: BundleManifest =
        toml::from_str(&text).map_err(|e| invalid(&src.display().to_string(), e.to_string()))?;
    if relative_inside(&manifest.install_path).is_none() {
        return Err(invalid(&manifest.id, format!("bad install_path {:?}", manifest.install_path)));
    }
    fs::create_dir_all(out_dir)?;
    let out = out_dir.join(format!("{}.tar", manifest.id));
    pack_bundle(&manifest, &src.join(FILES_PREFIX), &out)?;
    Ok(out)
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            collect(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).map_err(std::io::Error::other)?.to_path_buf());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_and_stage_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        fs::create_dir_all(src.join("numerics")).unwrap();
        fs::write(src.join("numerics/__init__.py"), "def mean(xs): return sum(xs)/len(xs)\n").unwrap();
        let bundles = tmp.path().join("bundles");
        fs::create_dir_all(&bundles).unwrap();
        let manifest = BundleManifest {
            id: "numerics-v1".into(),
            install_path: "deps/numerics".into(),
            env: BTreeMap::from([("PYTHONPATH".into(), "{install}".into())]),
        };
        pack_bundle(&manifest, &src, &bundles.join("numerics-v1.tar")).unwrap();
        let first = fs::read(bundles.join("numerics-v1.tar")).unwrap();
        pack_bundle(&manifest, &src, &bundles.join("numerics-v1.tar")).unwrap();
        assert_eq!(first, fs::read(bundles.join("numerics-v1.tar")).unwrap());

        let store = BundleStore::new(&bundles);
        assert!(store.contains("numerics-v1"));
        assert!(!store.contains("../numerics-v1"));
        let root = tmp.path().join("box");
        fs::create_dir_all(&root).unwrap();
        let (m, install) = store.stage("numerics-v1", &root).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(install, root.join("deps/numerics"));
        assert!(install.join("numerics/__init__.py").is_file());
    }

    #[test]
    fn unknown_bundle() {
        let tmp = tempfile::tempdir().unwrap();
        let store = BundleStore::new(tmp.path());
        assert!(matches!(store.manifest("nope"), Err(SandboxError::UnknownBundle(_))));
        assert!(matches!(BundleStore::empty().manifest("x"), Err(SandboxError::UnknownBundle(_))));
    }
}
