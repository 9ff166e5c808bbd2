//! Checkpoints: one file of concatenated CRFT records plus a JSON index.
//!
//! `params.crft` holds every parameter as a CRFT record (vectors are stored
//! as `1 × n`). `index.json` maps each parameter name to its true shape,
//! learning-rate group and byte range, and records the model configuration,
//! the legs the model was trained with and the label map.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::shard::{decode_shard, encode_shard};
use crate::data::LabelMap;
use crate::error::{CrabError, Result};
use crate::losses::Legs;
use crate::model::{CrabParams, ModelConfig};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.json";
pub const PARAMS_FILE: &str = "params.crft";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub model: ModelConfig,
    pub legs: Legs,
    pub labels: LabelMap,
    pub params: Vec<IndexEntry>,
}

fn as_matrix(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        2 => Ok(t.clone()),
        _ => t.clone().reshape(&[1, t.numel()]),
    }
}

pub fn save_checkpoint(dir: &Path, params: &CrabParams, labels: &LabelMap) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CrabError::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(params.store.len());
    for p in params.store.iter() {
        let record = encode_shard(&as_matrix(&p.value)?)?;
        entries.push(IndexEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            group: p.group,
            offset: blob.len() as u64,
            bytes: record.len() as u64,
        });
        blob.extend_from_slice(&record);
    }
    let index = CheckpointIndex {
        model: params.config.clone(),
        legs: params.legs,
        labels: labels.clone(),
        params: entries,
    };
    let blob_path = dir.join(PARAMS_FILE);
    fs::write(&blob_path, blob).map_err(|e| CrabError::io(&blob_path, e))?;
    let index_path = dir.join(INDEX_FILE);
    let mut json = serde_json::to_string_pretty(&index)?;
    json.push('\n');
    fs::write(&index_path, json).map_err(|e| CrabError::io(&index_path, e))
}

pub fn read_index(dir: &Path) -> Result<CheckpointIndex> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CrabError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CrabError::Format {
        path,
        offset: 0,
        detail: format!("bad checkpoint index: {e}"),
    })
}

/// Rebuilds the parameters, legs included, from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(CrabParams, LabelMap)> {
    let index = read_index(dir)?;
    let blob_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&blob_path).map_err(|e| CrabError::io(&blob_path, e))?;
    let mut store = ParamStore::new();
    for e in &index.params {
        let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
        if end > blob.len() {
            return Err(CrabError::Format {
                path: blob_path,
                offset: e.offset,
                detail: format!("record {} runs past the end of the file ({end} > {})", e.name, blob.len()),
            });
        }
        let matrix = decode_shard(&blob[start..end], &blob_path)?;
        let value = matrix.reshape(&e.shape).map_err(|_| CrabError::Format {
            path: blob_path.clone(),
            offset: e.offset,
            detail: format!("record {} does not hold shape {:?}", e.name, e.shape),
        })?;
        store.add(e.name.clone(), e.group, value);
    }
    let mut params = CrabParams::new(&index.model, index.legs, 0)?;
    if params.store.len() != store.len() {
        return Err(CrabError::Config(format!(
            "checkpoint holds {} parameters, the configured model has {}",
            store.len(),
            params.store.len()
        )));
    }
    params.load_matching(&store)?;
    Ok((params, index.labels))
}
