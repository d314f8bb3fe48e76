//! Content hashes linking every artifact under the output directory to the
//! inputs that produced it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// SHA-256 of a file, or of a directory's files (relative path and bytes,
/// in sorted path order).
pub fn content_hash(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            let bytes = fs::read(path.join(&rel)).map_err(|e| Error::io(path.join(&rel), e))?;
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
    } else {
        hasher.update(fs::read(path).map_err(|e| Error::io(path, e))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub label: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl Entry {
    pub fn of(label: impl Into<String>, path: &Path) -> Result<Self> {
        Ok(Self {
            label: label.into(),
            path: path.to_path_buf(),
            sha256: content_hash(path)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<Entry>,
    pub artifacts: Vec<Entry>,
}

/// `manifest.json` under the output directory: one record per command,
/// replaced each time the command runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub commands: BTreeMap<String, CommandRecord>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn update(out: &Path, command: &str, record: CommandRecord) -> Result<()> {
        let path = out.join(Self::FILE);
        let mut manifest: RunManifest = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?
        } else {
            RunManifest::default()
        };
        manifest.commands.insert(command.to_string(), record);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_tracks_content_and_names() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("a"), b"one").unwrap();
        fs::write(dir.path().join("sub/b"), b"two").unwrap();
        let h1 = content_hash(dir.path()).unwrap();
        assert_eq!(h1, content_hash(dir.path()).unwrap());
        fs::write(dir.path().join("sub/b"), b"tw0").unwrap();
        assert_ne!(h1, content_hash(dir.path()).unwrap());
        assert_eq!(
            content_hash(&dir.path().join("a")).unwrap(),
            "7692c3ad3540bb803c020b3aee66cd8887123234ea0c6e7143c0add73ff431ed"
        );
    }

    #[test]
    fn manifest_merges_commands() {
        let dir = tempfile::tempdir().unwrap();
        RunManifest::update(
            dir.path(),
            "train",
            CommandRecord {
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        RunManifest::update(dir.path(), "evaluate", CommandRecord::default()).unwrap();
        let text = fs::read_to_string(dir.path().join(RunManifest::FILE)).unwrap();
        let m: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(m.commands.len(), 2);
        assert_eq!(m.commands["train"].seed, 1);
    }
}
