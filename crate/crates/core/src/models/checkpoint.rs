//! Checkpoint container: a safetensors file whose metadata carries a
//! versioned JSON header next to the named parameter blobs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "ssr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_KEY: &str = "ssr.header";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    /// Echo of the model-defining configuration, compared on load.
    pub config: serde_json::Value,
    /// Free-form state (batch counter, stage, seeds, optimizer step counts).
    pub state: serde_json::Value,
}

impl CheckpointHeader {
    pub fn new(config: serde_json::Value, state: serde_json::Value) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config,
            state,
        }
    }
}

/// Writes atomically: the file appears under `path` only once fully written.
pub fn write_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert(HEADER_KEY.to_string(), serde_json::to_string(header)?);
    let bytes = safetensors::serialize(tensors.iter(), Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(
    path: &Path,
    device: &Device,
) -> Result<(CheckpointHeader, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{}: no checkpoint header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_str(raw)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: unknown format {:?}",
            path.display(),
            header.format
        )));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} is not supported (expected {CHECKPOINT_VERSION})",
            path.display(),
            header.version
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?
        .into_iter()
        .collect();
    Ok((header, tensors))
}

/// Fails unless `stored` equals `expected`, or `allow_mismatch` is set.
pub fn check_config(
    stored: &serde_json::Value,
    expected: &serde_json::Value,
    allow_mismatch: bool,
) -> Result<()> {
    if stored == expected || allow_mismatch {
        return Ok(());
    }
    Err(Error::Checkpoint(format!(
        "checkpoint was written with a different model config (stored {stored}, requested {expected}); pass the override flag to load anyway"
    )))
}

/// Splits `prefix.name` keys back into a per-prefix map.
pub fn take_prefixed(
    tensors: &BTreeMap<String, Tensor>,
    prefix: &str,
) -> BTreeMap<String, Tensor> {
    let p = format!("{prefix}.");
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
        .collect()
}

pub fn add_prefixed(
    out: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    tensors: BTreeMap<String, Tensor>,
) {
    for (k, v) in tensors {
        out.insert(format!("{prefix}.{k}"), v);
    }
}
