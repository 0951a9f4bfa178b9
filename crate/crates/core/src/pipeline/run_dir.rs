use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::Command;

use super::RunConfig;
use crate::error::{Error, Result};
use crate::numcore::checkpoint::{self, write_atomic};
use crate::numcore::ParamStore;

pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_FILE: &str = "seed.txt";
pub const GIT_FILE: &str = "git_describe.txt";
pub const HASHES_FILE: &str = "hashes.json";
pub const LOCK_FILE: &str = "LOCK";

/// `git describe --always --dirty` of the working directory, or `unknown`.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

/// A run directory owned exclusively by one writer while the value lives.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Takes the lock and records the resolved config, seed and source version.
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(path)?;
        match fs::OpenOptions::new().write(true).create_new(true).open(path.join(LOCK_FILE)) {
            Ok(_) => {}
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                return Err(Error::contract(format!(
                    "run directory {} is locked by another process (remove {LOCK_FILE} if stale)",
                    path.display()
                )))
            }
            Err(e) => return Err(e.into()),
        }
        let dir = Self { path: path.to_path_buf() };
        write_atomic(&path.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
        write_atomic(&path.join(SEED_FILE), format!("{}\n", cfg.run.seed).as_bytes())?;
        write_atomic(&path.join(GIT_FILE), format!("{}\n", git_describe()).as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Saves a checkpoint atomically and records its hash.
    pub fn save_checkpoint(&self, name: &str, store: &ParamStore) -> Result<String> {
        let hash = checkpoint::save(store, &self.path.join(format!("{name}.grpt")))?;
        let mut hashes = read_hashes(&self.path)?;
        hashes.insert(name.to_string(), hash.clone());
        write_atomic(&self.path.join(HASHES_FILE), serde_json::to_string_pretty(&hashes)?.as_bytes())?;
        Ok(hash)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path.join(name), bytes)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}

pub fn read_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    match fs::read(dir.join(HASHES_FILE)) {
        Ok(b) => Ok(serde_json::from_slice(&b)?),
        Err(e) if e.kind() == ErrorKind::NotFound => Ok(BTreeMap::new()),
        Err(e) => Err(e.into()),
    }
}

/// Loads `dir/name.grpt`, naming the producing phase when it is absent.
pub fn load_checkpoint(dir: &Path, name: &str, phase: &str) -> Result<ParamStore> {
    let path = dir.join(format!("{name}.grpt"));
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} (run `train --phase {phase}` first)",
            path.display()
        )));
    }
    checkpoint::load(&path)
}

pub fn load_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => e.into(),
    })?;
    RunConfig::from_toml(&text)
}
