//! Run manifest written beside each command's outputs: the effective
//! config, input digests, output names, and timing. Timing fields are the
//! only content that varies between identical runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Input path to sha256 hex digest.
    pub inputs: BTreeMap<String, String>,
    /// Output file names relative to the manifest location.
    pub outputs: Vec<String>,
    pub elapsed_seconds: f64,
    pub finished_unix: u64,
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let body =
        fs::read(path).with_context(|| format!("cannot read input {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&body)))
}

pub fn digest_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for p in paths {
        map.insert(p.display().to_string(), sha256_hex(p)?);
    }
    Ok(map)
}

/// Tracks a command's planned artifacts so a failure can quarantine
/// whatever was already written, and success can record the set.
pub struct RunScope {
    command: String,
    seed: u64,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    manifest_path: PathBuf,
    started: Instant,
}

impl RunScope {
    pub fn new(
        command: &str,
        seed: u64,
        config: BTreeMap<String, String>,
        inputs: BTreeMap<String, String>,
        outputs: Vec<PathBuf>,
        manifest_path: PathBuf,
    ) -> Self {
        RunScope {
            command: command.to_string(),
            seed,
            config,
            inputs,
            outputs,
            manifest_path,
            started: Instant::now(),
        }
    }

    /// Renames every planned output that exists to `<name>.quarantined`,
    /// so a failed run never leaves artifacts that look complete.
    pub fn quarantine(&self) {
        for path in self.outputs.iter().chain([&self.manifest_path]) {
            if !path.exists() {
                continue;
            }
            let mut name = path.file_name().unwrap_or_default().to_os_string();
            name.push(".quarantined");
            let target = path.with_file_name(name);
            match fs::rename(path, &target) {
                Ok(()) => log::warn!("quarantined partial output {}", target.display()),
                Err(e) => log::error!("cannot quarantine {}: {e}", path.display()),
            }
        }
    }

    /// Writes the manifest beside the outputs and returns its path.
    pub fn finish(self) -> Result<PathBuf> {
        let manifest = Manifest {
            command: self.command,
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            // Planned outputs a command legitimately skipped (a corpus too
            // small to split) are dropped rather than listed as phantoms.
            outputs: self
                .outputs
                .iter()
                .filter(|p| p.exists())
                .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
                .collect(),
            elapsed_seconds: self.started.elapsed().as_secs_f64(),
            finished_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&self.manifest_path, body + "\n")
            .with_context(|| format!("cannot write {}", self.manifest_path.display()))?;
        Ok(self.manifest_path)
    }
}
