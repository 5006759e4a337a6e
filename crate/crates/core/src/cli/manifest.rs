//! Run manifest with per-stage file digests, and the output-directory lock.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|_| Error::Digest(path.to_path_buf()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digest over the config hash, stage name and input digests.
    pub key: String,
    /// Paths relative to the output directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Ok(Self {
            tool_version: format!("dlalign {}", env!("CARGO_PKG_VERSION")),
            config_hash: config.hash()?,
            config: config.clone(),
            stages: BTreeMap::new(),
        })
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        match fs::read(dir.join(MANIFEST_FILE)) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Written through a temporary file and renamed into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    /// Digest recorded for `rel` by the stage that wrote it.
    pub fn produced(&self, rel: &str) -> Option<&str> {
        self.stages
            .values()
            .find_map(|s| s.outputs.get(rel).map(String::as_str))
    }

    pub fn stage_key(&self, name: &str, inputs: &BTreeMap<String, String>) -> String {
        let mut h = Sha256::new();
        h.update(self.config_hash.as_bytes());
        h.update([0]);
        h.update(name.as_bytes());
        for (path, digest) in inputs {
            h.update([0]);
            h.update(path.as_bytes());
            h.update([1]);
            h.update(digest.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Completed record for `name` under `key` whose outputs are all present
    /// and unchanged.
    pub fn up_to_date(&self, dir: &Path, name: &str, key: &str) -> bool {
        match self.stages.get(name) {
            Some(rec) if rec.key == key => rec
                .outputs
                .iter()
                .all(|(rel, d)| file_digest(&dir.join(rel)).map(|x| &x == d).unwrap_or(false)),
            _ => false,
        }
    }

    pub fn record(
        &mut self,
        dir: &Path,
        name: &str,
        key: String,
        inputs: BTreeMap<String, String>,
        outputs: &[String],
        started_unix: u64,
    ) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|rel| Ok((rel.clone(), file_digest(&dir.join(rel))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        self.stages.insert(
            name.to_string(),
            StageRecord {
                key,
                inputs,
                outputs,
                started_unix,
                finished_unix: now(),
            },
        );
        self.save(dir)
    }
}

pub(crate) fn unix_now() -> u64 {
    now()
}

/// Exclusive ownership of an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
