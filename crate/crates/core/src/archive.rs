//! Deterministic tar writing shared by bundles and submission downloads.

use std::io::Write;
use std::path::{Component, Path};

/// Appends a regular file with fixed metadata (mode 0644, uid/gid 0,
/// mtime 0) so identical content always yields identical archive bytes.
pub fn append_file<W: Write>(builder: &mut tar::Builder<W>, path: &Path, data: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_ustar();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    builder.append_data(&mut header, path, data)
}

/// Packs every regular file below `dir`, sorted by path.
pub fn pack_tree(dir: &Path) -> std::io::Result<Vec<u8>> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort();
    let mut builder = tar::Builder::new(Vec::new());
    for rel in files {
        let data = std::fs::read(dir.join(&rel))?;
        append_file(&mut builder, &rel, &data)?;
    }
    builder.into_inner()
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<std::path::PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            collect(root, &path, out)?;
        } else if entry.file_type()?.is_file() {
            out.push(path.strip_prefix(root).map_err(std::io::Error::other)?.to_path_buf());
        }
    }
    Ok(())
}

/// Unpacks an uploaded archive below `dest`. Only directories and regular
/// files with plain relative paths are accepted.
pub fn unpack_tree(data: &[u8], dest: &Path) -> std::io::Result<usize> {
    let invalid = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
    let mut archive = tar::Archive::new(data);
    archive.set_preserve_permissions(false);
    let mut count = 0;
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.into_owned();
        let plain = path.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
        if !plain {
            return Err(invalid(format!("archive entry {} leaves the archive root", path.display())));
        }
        let kind = entry.header().entry_type();
        let target = dest.join(&path);
        if kind.is_dir() {
            std::fs::create_dir_all(&target)?;
        } else if kind.is_file() {
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            entry.unpack(&target)?;
            count += 1;
        } else {
            return Err(invalid(format!("archive entry {} is not a regular file", path.display())));
        }
    }
    Ok(count)
}
