//! Artifact writing: atomic file replacement, CSV export, run manifests.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{CliError, CliResult, ExperimentConfig};

/// Write-temp-then-rename so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize rows to CSV (header included) and write atomically.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Run(anyhow::anyhow!("csv flush: {}", e)))?;
    atomic_write(path, &bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Run(anyhow::Error::new(e)))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Content hash of the resolved inputs: every artifact is reproducible
/// from (config, seed) alone.
pub fn config_hash(config: &ExperimentConfig, seed: u64) -> CliResult<String> {
    let canon = serde_json::to_vec(config).map_err(|e| CliError::Run(anyhow::Error::new(e)))?;
    let mut hasher = Sha256::new();
    hasher.update(&canon);
    hasher.update(seed.to_le_bytes());
    Ok(hex::encode(hasher.finalize()))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
pub struct RunManifest<'a> {
    pub config: &'a ExperimentConfig,
    pub seed: u64,
    pub config_hash: String,
    pub outputs: Vec<String>,
}

pub fn write_manifest(
    dir: &Path,
    config: &ExperimentConfig,
    seed: u64,
    outputs: &[PathBuf],
) -> CliResult<()> {
    let manifest = RunManifest {
        config,
        seed,
        config_hash: config_hash(config, seed)?,
        outputs: outputs
            .iter()
            .map(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_string()
            })
            .collect(),
    };
    write_json(&dir.join("run-manifest.json"), &manifest)
}
