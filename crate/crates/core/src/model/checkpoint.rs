//! Checkpoint files: a magic header, a JSON manifest, and raw parameter
//! blobs. Save/load round trips are bit-exact.

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 7] = b"EEGPE1\n";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    channel_names: Vec<String>,
    patches_per_epoch: usize,
    params: Vec<ParamEntry>,
}

/// Writes `state` to `path`. Layout: magic, little-endian u64 manifest
/// length, JSON manifest, then each parameter's f64 data little-endian in
/// manifest order.
pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    state.validate_layout()?;
    let manifest = Manifest {
        config: state.config,
        channel_names: state.channel_names.clone(),
        patches_per_epoch: state.patches_per_epoch,
        params: state
            .params
            .iter()
            .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    for tensor in state.params.values() {
        for v in tensor.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Reads a checkpoint and validates magic, manifest consistency, parameter
/// shapes against the configuration, and value finiteness.
pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path)?;
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| Error::Parse(format!("{} is not a checkpoint file", path.display())))?;
    if rest.len() < 8 {
        return Err(Error::Parse("checkpoint truncated before manifest length".into()));
    }
    let (len_bytes, rest) = rest.split_at(8);
    let manifest_len = u64::from_le_bytes(len_bytes.try_into().expect("eight bytes")) as usize;
    if rest.len() < manifest_len {
        return Err(Error::Parse("checkpoint truncated inside manifest".into()));
    }
    let (manifest_bytes, mut blob) = rest.split_at(manifest_len);
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)?;

    let mut params = BTreeMap::new();
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        if blob.len() < n * 8 {
            return Err(Error::Parse(format!(
                "checkpoint truncated inside parameter {}",
                entry.name
            )));
        }
        let (data_bytes, tail) = blob.split_at(n * 8);
        blob = tail;
        let data: Vec<f64> = data_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        let tensor = Tensor::new(&entry.shape, data)?;
        if params.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::Parse(format!("duplicate parameter {}", entry.name)));
        }
    }
    if !blob.is_empty() {
        return Err(Error::Parse(format!(
            "checkpoint has {} trailing bytes",
            blob.len()
        )));
    }
    let state = ModelState {
        config: manifest.config,
        channel_names: manifest.channel_names,
        patches_per_epoch: manifest.patches_per_epoch,
        params,
    };
    state.validate_layout()?;
    Ok(state)
}
