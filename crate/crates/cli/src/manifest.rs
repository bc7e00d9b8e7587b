//! Experiment manifests: what ran, with which config, on which inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "experiment.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Resolved configuration after flags and `--config` overrides.
    pub config: serde_json::Value,
    /// SHA-256 of each input file, keyed by path relative to its input directory.
    pub inputs: BTreeMap<String, String>,
    /// Hash of everything above; equal fingerprints mean equal outputs.
    pub fingerprint: String,
    pub created_unix: u64,
}

impl ExperimentManifest {
    pub fn new(
        command: &str,
        seed: u64,
        config: serde_json::Value,
        inputs: BTreeMap<String, String>,
    ) -> Result<Self> {
        let version = match option_env!("DYNACQ_GIT_REV") {
            Some(rev) => format!("{}+{}", env!("CARGO_PKG_VERSION"), rev),
            None => env!("CARGO_PKG_VERSION").to_string(),
        };
        let body = serde_json::to_vec(&(command, &version, seed, &config, &inputs))?;
        Ok(ExperimentManifest {
            command: command.into(),
            version,
            seed,
            config,
            inputs,
            fingerprint: hex::encode(Sha256::digest(&body)),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Hashes every regular file directly inside `dir` except the manifest itself,
/// keys prefixed by `label/`.
pub fn hash_dir(label: &str, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_FILE)
        .collect();
    names.sort();
    for n in names {
        let bytes = fs::read(dir.join(&n))?;
        out.insert(format!("{}/{}", label, n), hex::encode(Sha256::digest(&bytes)));
    }
    Ok(())
}
