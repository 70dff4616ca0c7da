//! Single-file tensor archives with a JSON header, written atomically.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{nn, Kind, Tensor};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "__meta__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// What the archive holds, e.g. `gan` or `segmenter`.
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes `tensors` and `meta` to `path` through a temporary file and a rename.
pub fn save_archive(path: &Path, meta: &CheckpointMeta, tensors: &[(String, Tensor)]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let header = serde_json::to_vec(meta)?;
    let mut named: Vec<(&str, Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t.detach().contiguous())).collect();
    named.push((META_KEY, Tensor::from_slice(&header)));
    let tmp = temp_path(path);
    Tensor::save_multi(&named, &tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<(CheckpointMeta, HashMap<String, Tensor>)> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
    }
    let mut tensors: HashMap<String, Tensor> = Tensor::load_multi(path)?.into_iter().collect();
    let header = tensors
        .remove(META_KEY)
        .ok_or_else(|| Error::Checkpoint(format!("{} has no header", path.display())))?;
    let bytes: Vec<u8> = Vec::<u8>::try_from(&header.to_kind(Kind::Uint8))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", meta.version)));
    }
    Ok((meta, tensors))
}

/// Every variable of `vs` (parameters and normalization statistics) under `prefix`.
pub fn collect_vars(vs: &nn::VarStore, prefix: &str) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> =
        vs.variables().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)).collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Copies tensors named `<prefix><var>` into `vs`; every variable must be present with a matching shape.
pub fn restore_vars(vs: &nn::VarStore, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
    tch::no_grad(|| {
        for (name, mut var) in vs.variables() {
            let key = format!("{prefix}{name}");
            let src = tensors.get(&key).ok_or_else(|| Error::Checkpoint(format!("`{key}` is missing")))?;
            if src.size() != var.size() {
                return Err(Error::Checkpoint(format!("`{key}` has shape {:?}, expected {:?}", src.size(), var.size())));
            }
            var.copy_(&src.to_kind(var.kind()));
        }
        Ok(())
    })
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Order-independent digest of the variable values of a store.
pub fn vars_hash(vs: &nn::VarStore) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in collect_vars(vs, "") {
        hasher.update(name.as_bytes());
        let flat = t.detach().to_kind(Kind::Float).contiguous().view(-1);
        let mut buf = vec![0f32; flat.numel()];
        let n = buf.len();
        flat.copy_data(&mut buf, n);
        for v in buf {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    #[test]
    fn round_trip_and_missing_vars() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let vs = nn::VarStore::new(Device::Cpu);
        let _w = vs.root().var("w", &[2, 3], nn::Init::Randn { mean: 0.0, stdev: 1.0 });
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            kind: "test".into(),
            config: serde_json::json!({"a": 1}),
            step: 7,
            seed: 3,
            extra: serde_json::Value::Null,
        };
        save_archive(&path, &meta, &collect_vars(&vs, "gen/")).unwrap();
        assert!(!temp_path(&path).exists());
        let (back, tensors) = load_archive(&path).unwrap();
        assert_eq!(back, meta);
        let other = nn::VarStore::new(Device::Cpu);
        let _w2 = other.root().var("w", &[2, 3], nn::Init::Const(0.0));
        restore_vars(&other, "gen/", &tensors).unwrap();
        assert_eq!(vars_hash(&vs), vars_hash(&other));
        assert!(restore_vars(&other, "disc/", &tensors).is_err());
        assert!(load_archive(&dir.path().join("nope")).is_err());
        assert_eq!(file_hash(&path).unwrap().len(), 64);
    }
}
