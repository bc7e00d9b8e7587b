//! Network checkpoints: `checkpoint.json` plus a raw little-endian `f64` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ReconConfig, ReconParams};
use crate::autodiff::Tensor;
use crate::data::{f64_from_le_bytes, f64_to_le_bytes};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "params.f64";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ReconConfig,
    pub params: Vec<ParamEntry>,
    pub numel: usize,
    pub dtype: String,
    pub blob: String,
}

pub fn save_checkpoint(dir: &Path, cfg: &ReconConfig, params: &ReconParams) -> Result<()> {
    params.validate(cfg)?;
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        version: VERSION,
        config: cfg.clone(),
        params: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        numel: params.numel(),
        dtype: "f64le".into(),
        blob: BLOB_FILE.into(),
    };
    let mut blob = Vec::with_capacity(manifest.numel * 8);
    for t in &params.tensors {
        blob.extend(f64_to_le_bytes(t.data()));
    }
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads and strictly validates a checkpoint against its own declared config.
pub fn load_checkpoint(dir: &Path) -> Result<(ReconConfig, ReconParams)> {
    let mpath = dir.join(MANIFEST_FILE);
    let m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.version != VERSION || m.dtype != "f64le" {
        return Err(Error::format(&mpath, format!("unsupported version {} / dtype {}", m.version, m.dtype)));
    }
    m.config.validate()?;
    let specs = m.config.param_specs();
    let declared: Vec<(String, Vec<usize>)> = m.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    if declared != specs {
        return Err(Error::format(&mpath, "parameter list does not match the declared config"));
    }
    let total: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if total != m.numel {
        return Err(Error::format(&mpath, format!("numel {} but shapes sum to {}", m.numel, total)));
    }
    let bpath = dir.join(&m.blob);
    let bytes = fs::read(&bpath)?;
    if bytes.len() != total * 8 {
        return Err(Error::format(&bpath, format!("expected {} bytes, found {}", total * 8, bytes.len())));
    }
    let values = f64_from_le_bytes(&bytes);
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(specs.len());
    for (name, shape) in &specs {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape.clone(), values[offset..offset + n].to_vec())?;
        if !t.is_finite() {
            return Err(Error::format(&bpath, format!("non-finite values in {}", name)));
        }
        tensors.push(t);
        offset += n;
    }
    let params = ReconParams {
        names: specs.into_iter().map(|(n, _)| n).collect(),
        tensors,
    };
    Ok((m.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_strictness() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ReconConfig {
            channels: 4,
            n_blocks: 1,
            heads: 2,
            ..Default::default()
        };
        let p = ReconParams::init(&cfg, 9).unwrap();
        save_checkpoint(dir.path(), &cfg, &p).unwrap();
        let (c2, p2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2, p);

        let blob = dir.path().join(BLOB_FILE);
        let mut bytes = fs::read(&blob).unwrap();
        bytes.pop();
        fs::write(&blob, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));

        save_checkpoint(dir.path(), &cfg, &p).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"channels\": 4", "\"channels\": 6");
        fs::write(&mpath, text).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
