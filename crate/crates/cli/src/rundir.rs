//! Output directories: an exclusive lock for the lifetime of a command and a
//! manifest written before any work starts.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use commer_core::container::{sha256_hex, write_atomic};
use serde::Serialize;

pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// Creates `path` if needed and takes its lock; fails when another
    /// invocation holds it.
    pub fn open(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let lock = path.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self { path: path.to_path_buf(), lock }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("{} is locked by another invocation (remove {} if it is stale)", path.display(), lock.display())
            }
            Err(e) => Err(e).with_context(|| format!("locking {}", path.display())),
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        Ok(write_atomic(&self.file(name), bytes)?)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub git_describe: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            command: command.to_owned(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            git_describe: git_describe(),
            seed,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
        })
    }

    /// Records a file, or every regular file directly inside a directory.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)
                .with_context(|| format!("listing {}", path.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && !p.ends_with(".lock"))
                .collect();
            entries.sort();
            for p in entries {
                self.input(&p)?;
            }
            return Ok(());
        }
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, dir: &RunDir) -> Result<()> {
        dir.write("manifest.json", &serde_json::to_vec_pretty(self)?)
    }
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_open_fails_until_the_first_drops() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::open(dir.path()).unwrap();
        assert!(RunDir::open(dir.path()).is_err());
        drop(a);
        assert!(RunDir::open(dir.path()).is_ok());
    }

    #[test]
    fn directory_inputs_are_hashed_per_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.jsonl"), b"x").unwrap();
        fs::write(dir.path().join("b.jsonl"), b"y").unwrap();
        let mut m = Manifest::new("t", serde_json::json!({}), None).unwrap();
        m.input(dir.path()).unwrap();
        assert_eq!(m.inputs.len(), 2);
        assert!(m.inputs.values().any(|h| *h == sha256_hex(b"x")));
    }
}
