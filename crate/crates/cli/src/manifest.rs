//! `manifest.json` written next to every stage's outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    pub flags: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub duration_secs: f64,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Hashes of `path` itself if it is a file, or of every regular file
/// directly inside it except an existing manifest, sorted by name.
pub fn hash_tree(path: &Path) -> std::io::Result<Vec<FileHash>> {
    let mut files = Vec::new();
    if path.is_file() {
        files.push(path.to_path_buf());
    } else if path.is_dir() {
        for entry in fs::read_dir(path)? {
            let p = entry?.path();
            if p.is_file() && p.file_name().is_some_and(|n| n != FILE_NAME) {
                files.push(p);
            }
        }
    }
    files.sort();
    files
        .into_iter()
        .map(|p| {
            Ok(FileHash {
                sha256: sha256_file(&p)?,
                path: p,
            })
        })
        .collect()
}

impl RunManifest {
    pub fn new(subcommand: &str, flags: &impl Serialize, seeds: Vec<u64>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            flags: serde_json::to_value(flags).unwrap_or(serde_json::Value::Null),
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
        }
    }

    /// Hashes `inputs` and `outputs` and writes the manifest into `dir`.
    pub fn finish(mut self, inputs: &[&Path], outputs: &[&Path], dir: &Path, elapsed: Duration) -> std::io::Result<()> {
        for p in inputs {
            self.inputs.extend(hash_tree(p)?);
        }
        for p in outputs {
            self.outputs.extend(hash_tree(p)?);
        }
        self.duration_secs = elapsed.as_secs_f64();
        let text = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        fs::write(dir.join(FILE_NAME), text + "\n")
    }
}
