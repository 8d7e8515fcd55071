//! Per-run manifest: resolved configuration, input digests, outputs and timing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: Value,
    /// SHA-256 of every input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Command-specific extras such as per-epoch wall-clock time or metrics.
    pub details: BTreeMap<String, Value>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn start(command: &str, config: Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_unix: now(),
            finished_unix: 0.0,
            details: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.outputs.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        self.details
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable detail"));
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = now();
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lists_inputs_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("in.txt");
        fs::write(&p, "x").unwrap();
        let mut m = RunManifest::start("test", serde_json::json!({"k": 1}), Some(3));
        m.input(&p).unwrap();
        m.output(&p).unwrap();
        m.detail("epochs", [1.0, 2.0]);
        let written = m.finish(dir.path()).unwrap();
        let v: Value = serde_json::from_str(&fs::read_to_string(written).unwrap()).unwrap();
        assert_eq!(v["seed"], 3);
        assert_eq!(v["outputs"]["in.txt"].as_str().unwrap().len(), 64);
        assert!(v["finished_unix"].as_f64().unwrap() >= v["started_unix"].as_f64().unwrap());
    }
}
