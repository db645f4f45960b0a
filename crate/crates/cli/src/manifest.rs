//! Append-only run manifests, one JSON record per line in `manifest.jsonl`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{runtime, CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory for outputs, to the workdir for inputs.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    #[serde(default)]
    pub details: serde_json::Value,
}

pub fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| runtime(path.display(), e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash identifying a run: command, resolved config and input contents.
pub fn config_hash(command: &str, config: &serde_json::Value, inputs: &[Artifact]) -> String {
    let key = serde_json::json!({ "command": command, "config": config, "inputs": inputs });
    sha256_hex(key.to_string().as_bytes())
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

pub fn read_manifest(dir: &Path) -> CliResult<Vec<RunManifest>> {
    let path = manifest_path(dir);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| runtime(path.display(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Usage(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn append_manifest(dir: &Path, record: &RunManifest) -> CliResult<()> {
    let path = manifest_path(dir);
    let mut line = serde_json::to_string(record).map_err(|e| runtime("manifest", e))?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| runtime(path.display(), e))?;
    f.write_all(line.as_bytes())
        .map_err(|e| runtime(path.display(), e))
}

/// The recorded run with this hash whose artifacts are all present and unchanged.
pub fn find_completed(dir: &Path, command: &str, hash: &str) -> CliResult<Option<RunManifest>> {
    for record in read_manifest(dir)? {
        if record.command != command || record.config_hash != hash {
            continue;
        }
        let intact = record
            .artifacts
            .iter()
            .all(|a| sha256_file(&dir.join(&a.path)).is_ok_and(|h| h == a.sha256));
        if intact {
            return Ok(Some(record));
        }
    }
    Ok(None)
}
