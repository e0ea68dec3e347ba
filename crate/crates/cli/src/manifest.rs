//! Run-directory manifest: every artifact with its content hash, so that
//! re-running a command under the same config and seed is checkable as
//! byte-identical by comparing one file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.txt";

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("cannot list {}", dir.display()))?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.file_name().map(|n| n != MANIFEST_NAME).unwrap_or(true) {
            out.push(path);
        }
    }
    Ok(())
}

/// Rewrite `<run_dir>/manifest.txt`: one `<sha256>  <relative path>` line per
/// artifact, sorted by path.
pub fn update_manifest(run_dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(run_dir, &mut files)?;
    let mut out = String::new();
    for path in files {
        let bytes =
            std::fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        let rel = path
            .strip_prefix(run_dir)
            .expect("collected under run_dir")
            .to_string_lossy()
            .replace('\\', "/");
        out.push_str(&format!("{}  {}\n", hex::encode(digest), rel));
    }
    std::fs::write(run_dir.join(MANIFEST_NAME), out)
        .with_context(|| format!("cannot write manifest in {}", run_dir.display()))
}
