//! Run-directory bookkeeping: every subcommand writes its artifacts under
//! one directory and finishes by writing a manifest listing each artifact
//! with its content hash. Manifests carry no timestamps, so identical
//! configs and seeds produce byte-identical run directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Serialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub struct RunDir {
    root: PathBuf,
    command: String,
    config_hash: String,
    artifacts: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            artifacts: Vec::new(),
        })
    }

    /// Write an artifact file and record it for the manifest.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(path.clone());
        Ok(path)
    }

    /// Record a file that was written directly (e.g. a checkpoint).
    pub fn record(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    /// Reserve a path inside the run directory without writing yet.
    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn finish(self) -> Result<()> {
        let mut entries = Vec::new();
        for path in &self.artifacts {
            let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
            let mut hasher = Sha256::new();
            hasher.update(&bytes);
            let sha: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
            let rel = path.strip_prefix(&self.root).unwrap_or(path);
            entries.push(ArtifactEntry {
                path: rel.to_string_lossy().into_owned(),
                bytes: bytes.len() as u64,
                sha256: sha,
            });
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command: self.command,
            config_hash: self.config_hash,
            artifacts: entries,
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        fs::write(self.root.join("manifest.json"), json)?;
        Ok(())
    }
}
