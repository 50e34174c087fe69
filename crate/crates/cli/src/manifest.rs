// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests and all-or-nothing artifact writing.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[must_use]
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub seeds: serde_json::Value,
    pub precision: Option<String>,
    pub jobs: Option<usize>,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    /// Seconds since the epoch from `SOURCE_DATE_EPOCH`, when set.
    pub timestamp: Option<u64>,
}

/// Prior-stage artifacts, read from one directory and digested on load.
pub struct Inputs {
    dir: PathBuf,
    read: Vec<FileDigest>,
}

impl Inputs {
    #[must_use]
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            read: Vec::new(),
        }
    }

    pub fn read(&mut self, name: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(name);
        let bytes = std::fs::read(&path).with_context(|| format!("reading input {}", path.display()))?;
        self.read.push(FileDigest {
            name: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len(),
        });
        Ok(bytes)
    }

    pub fn read_string(&mut self, name: &str) -> Result<String> {
        String::from_utf8(self.read(name)?).with_context(|| format!("{name} is not valid UTF-8"))
    }

    #[must_use]
    pub fn digests(&self) -> Vec<FileDigest> {
        self.read.clone()
    }
}

/// Artifacts held in memory until the command has fully succeeded.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    pub fn add_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.add(name, s);
        Ok(())
    }

    #[must_use]
    pub fn digests(&self) -> Vec<FileDigest> {
        self.files
            .iter()
            .map(|(name, bytes)| FileDigest {
                name: name.clone(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len(),
            })
            .collect()
    }

    /// Write every artifact and the manifest into `dir`. Each file goes to a
    /// temporary name first and is renamed into place.
    pub fn commit(mut self, dir: &Path, manifest: &RunManifest) -> Result<Vec<PathBuf>> {
        let mut m = serde_json::to_string_pretty(manifest)?;
        m.push('\n');
        self.add(format!("{}.manifest.json", manifest.command), m);
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut staged = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let tmp = dir.join(format!(".{name}.partial"));
            if let Err(e) = std::fs::write(&tmp, bytes) {
                for (t, _) in &staged {
                    let _ = std::fs::remove_file(t);
                }
                let _ = std::fs::remove_file(&tmp);
                return Err(e).with_context(|| format!("writing {}", tmp.display()));
            }
            staged.push((tmp, dir.join(name)));
        }
        for (tmp, dst) in &staged {
            std::fs::rename(tmp, dst).with_context(|| format!("moving {} into place", dst.display()))?;
        }
        Ok(staged.into_iter().map(|(_, dst)| dst).collect())
    }
}

#[must_use]
pub fn source_date_epoch() -> Option<u64> {
    std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse().ok()
}
