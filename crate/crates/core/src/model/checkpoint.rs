//! Checkpoint = JSON manifest (config + tensor index) and a flat
//! little-endian f32 blob next to it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, TensorInfo};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: ModelConfig,
    blob: String,
    tensors: Vec<TensorInfo>,
}

/// Writes `<stem>.json` and `<stem>.bin` in `dir`; returns both paths.
pub fn save_checkpoint(params: &ModelParams<f32>, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob_name = format!("{stem}.bin");
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        config: params.config().clone(),
        blob: blob_name.clone(),
        tensors: params.layout().tensors().to_vec(),
    };
    let manifest_path = dir.join(format!("{stem}.json"));
    let blob_path = dir.join(blob_name);
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    let bytes: Vec<u8> = params.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&blob_path, bytes).map_err(|e| Error::io(&blob_path, e))?;
    Ok((manifest_path, blob_path))
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<ModelParams<f32>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::FormatVersion { found: manifest.format_version, expected: CHECKPOINT_VERSION });
    }
    let blob_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!("blob length {} is not a multiple of 4", bytes.len())));
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let params = ModelParams::from_data(manifest.config, data)?;
    if params.layout().tensors() != manifest.tensors.as_slice() {
        return Err(Error::Checkpoint("tensor index does not match the configured layout".into()));
    }
    Ok(params)
}
