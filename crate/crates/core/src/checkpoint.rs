//! Checkpoint directories: `weights.safetensors` with every named parameter
//! (student and teacher), `optimizer.safetensors` with AdamW moments, and a
//! `manifest.json` carrying the format version, config echo and step.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const WEIGHTS: &str = "weights.safetensors";
const OPTIMIZER: &str = "optimizer.safetensors";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub step: usize,
    /// Set while a run is still in progress (not the final checkpoint).
    #[serde(default)]
    pub partial: bool,
    #[serde(default)]
    pub optimizer_steps: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore,
    pub optimizer: BTreeMap<String, Tensor>,
}

fn write_tensors(path: &Path, tensors: BTreeMap<String, Tensor>) -> Result<()> {
    let map: HashMap<String, Tensor> = tensors.into_iter().collect();
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ParamStore,
    optimizer: BTreeMap<String, Tensor>,
    manifest: &CheckpointManifest,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tensors(&dir.join(WEIGHTS), params.tensors())?;
    write_tensors(&dir.join(OPTIMIZER), optimizer)?;
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let m: CheckpointManifest = serde_json::from_slice(&fs::read(path)?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!("format version {}", m.format_version)));
    }
    Ok(m)
}

fn read_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(candle_core::safetensors::load(path, &Device::Cpu)?.into_iter().collect())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let tensors = read_tensors(&dir.join(WEIGHTS))?;
    let dtype = tensors.values().next().map(Tensor::dtype).unwrap_or(DType::F32);
    let mut params = ParamStore::new(dtype);
    for (name, t) in tensors {
        if t.dtype() != dtype {
            return Err(Error::IncompatibleCheckpoint(format!("mixed dtypes at `{name}`")));
        }
        params.insert(name, t)?;
    }
    let optimizer = read_tensors(&dir.join(OPTIMIZER))?;
    Ok(Checkpoint { manifest, params, optimizer })
}
