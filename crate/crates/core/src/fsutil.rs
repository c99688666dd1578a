//! Small filesystem helpers: atomic replacement, write-if-changed, digests.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Write `bytes` to `path` through a sibling temp file and a rename, so
/// readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("entry");
    let tmp = dir.join(format!(".{name}.{}.{:?}.tmp", std::process::id(), std::thread::current().id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Atomically write `bytes` unless `path` already holds exactly them.
/// Returns whether a write happened.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    atomic_write(path, bytes)?;
    Ok(true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// `<file>.sha256` next to `path`.
pub fn checksum_sidecar(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".sha256");
    path.with_file_name(name)
}

/// Write `bytes` plus a `.sha256` sidecar holding their digest.
pub fn write_with_checksum(path: &Path, bytes: &[u8]) -> Result<String> {
    let digest = sha256_hex(bytes);
    atomic_write(path, bytes)?;
    atomic_write(&checksum_sidecar(path), format!("{digest}\n").as_bytes())?;
    Ok(digest)
}

/// Read a file and verify it against its `.sha256` sidecar.
pub fn read_verified(path: &Path) -> Result<(Vec<u8>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = checksum_sidecar(path);
    let expected = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let digest = sha256_hex(&bytes);
    if expected.trim() != digest {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: format!("checksum mismatch: sidecar {} vs content {digest}", expected.trim()),
        });
    }
    Ok((bytes, digest))
}
