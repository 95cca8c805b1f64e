//! Binary checkpoint: magic `AVRK`, `u32` version, `u64` header length, a
//! JSON header, then every tensor as little-endian `f32` in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{CellVocab, Model, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::features::FeatureStats;
use crate::train::EpochRecord;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"AVRK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub stats: FeatureStats,
    pub vocab: CellVocab,
    pub species: Vec<String>,
    pub epoch: usize,
    pub val_ap: Option<f64>,
    pub val_auc: Option<f64>,
    pub threshold: f64,
    pub history: Vec<EpochRecord>,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Parameters,
}

impl Checkpoint {
    /// Builds a checkpoint; the stored parameters are rounded to `f32`.
    pub fn new(mut header: CheckpointHeader, params: &Parameters) -> Self {
        let params = params.round_to_f32();
        header.tensors = params
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorInfo {
                name,
                rows: t.nrows(),
                cols: t.ncols(),
            })
            .collect();
        Self { header, params }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.header.model.clone(), self.params.clone())
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_vec(&ck.header)?;
    let mut buf = Vec::with_capacity(16 + header.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in ck.params.tensors() {
        for &v in t.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    header.model.validate()?;

    let mut params = Parameters::init(&ModelConfig { seed: 0, ..header.model.clone() })?;
    let expected: Vec<TensorInfo> = params
        .tensors()
        .into_iter()
        .map(|(name, t)| TensorInfo {
            name,
            rows: t.nrows(),
            cols: t.ncols(),
        })
        .collect();
    if expected != header.tensors {
        return Err(bad("tensor manifest does not match the model configuration"));
    }
    let mut off = 16 + hlen;
    for (_, t) in params.tensors_mut() {
        let n = t.len() * 4;
        let raw = bytes.get(off..off + n).ok_or_else(|| bad("truncated tensor data"))?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        *t = Array2::from_shape_vec(t.dim(), vals).expect("length matches shape");
        off += n;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint { header, params })
}
