//! Artifact output: config hashing, JSON reports, and CSV tables.
//!
//! Every artifact names the exact inputs that produced it: JSON files
//! carry `config_hash`, `seed`, and the full resolved `config` next to
//! the result, CSV files a `# config_hash=… seed=…` comment line. A run
//! can therefore be reproduced from any of its outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use qcd::{Error, Result};

use crate::config::ExperimentConfig;

/// The config as JSON with `output_dir` dropped: the part that decides
/// the science, independent of where results land.
pub fn science_json(config: &ExperimentConfig) -> Result<Value> {
    let mut value = serde_json::to_value(config)
        .map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))?;
    value
        .as_object_mut()
        .expect("a config serializes to an object")
        .remove("output_dir");
    Ok(value)
}

/// Hex SHA-256 of a JSON value in its serialized form.
pub fn hash_json(value: &Value) -> String {
    let bytes = serde_json::to_vec(value).expect("JSON values serialize");
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    Ok(hash_json(&science_json(config)?))
}

/// Write a JSON artifact: provenance fields first, the payload under
/// `result`. Returns the path written.
pub fn write_json<T: Serialize>(
    dir: &Path,
    name: &str,
    config_json: Value,
    seed: u64,
    payload: &T,
) -> Result<PathBuf> {
    let body = serde_json::json!({
        "config_hash": hash_json(&config_json),
        "seed": seed,
        "config": config_json,
        "result": serde_json::to_value(payload)
            .map_err(|e| Error::InvalidConfig(format!("cannot serialize {name}: {e}")))?,
    });
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&body).expect("JSON values serialize");
    std::fs::write(&path, text + "\n")
        .map_err(|e| Error::InvalidConfig(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

pub fn write_report<T: Serialize>(
    dir: &Path,
    name: &str,
    config: &ExperimentConfig,
    payload: &T,
) -> Result<PathBuf> {
    write_json(dir, name, science_json(config)?, config.seed, payload)
}

/// Write a CSV artifact with the provenance comment on top.
pub fn write_csv(
    dir: &Path,
    name: &str,
    config: &ExperimentConfig,
    columns: &str,
    rows: &[String],
) -> Result<PathBuf> {
    let mut text =
        format!("# config_hash={} seed={}\n{columns}\n", config_hash(config)?, config.seed);
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    let path = dir.join(name);
    std::fs::write(&path, text)
        .map_err(|e| Error::InvalidConfig(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}
