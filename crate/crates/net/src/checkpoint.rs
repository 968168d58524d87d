//! Parameter checkpoints: magic, u64 LE header length, JSON header, then
//! the parameters as little-endian f32 in declaration order.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ulfdti::sample::SAMPLE_CHANNEL_ORDER;

use crate::error::{NetError, Result};
use crate::loss::LossWeights;
use crate::model::{DiffSrModel, ModelConfig};
use crate::params::ParamSpec;

pub const MAGIC: &[u8; 8] = b"ULFDSR01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub channel_order: String,
    /// Training seed.
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub params: Vec<ParamSpec>,
    pub trained: bool,
    pub iterations: usize,
    /// SHA-256 of the f32 payload, hex.
    pub payload_sha256: String,
}

fn payload(model: &DiffSrModel) -> Vec<u8> {
    let flat = model.params.flatten();
    let mut out = Vec::with_capacity(4 * flat.len());
    for v in flat {
        out.write_f32::<LittleEndian>(v as f32).expect("write to Vec");
    }
    out
}

pub fn encode(model: &DiffSrModel, seed: u64, loss_weights: &LossWeights) -> Result<Vec<u8>> {
    let body = payload(model);
    let header = CheckpointHeader {
        model: model.config.clone(),
        channel_order: SAMPLE_CHANNEL_ORDER.to_string(),
        seed,
        loss_weights: loss_weights.clone(),
        params: model.params.specs.clone(),
        trained: model.trained,
        iterations: model.iterations,
        payload_sha256: hex::encode(Sha256::digest(&body)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.write_u64::<LittleEndian>(json.len() as u64).expect("write to Vec");
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(DiffSrModel, CheckpointHeader)> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| NetError::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let len = r
        .read_u64::<LittleEndian>()
        .map_err(|_| NetError::Checkpoint("truncated header length".into()))? as usize;
    if len > r.len() {
        return Err(NetError::Checkpoint("header length exceeds file".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&r[..len])?;
    let body = &r[len..];
    if header.channel_order != SAMPLE_CHANNEL_ORDER {
        return Err(NetError::Checkpoint(format!("unexpected channel order {:?}", header.channel_order)));
    }
    if hex::encode(Sha256::digest(body)) != header.payload_sha256 {
        return Err(NetError::Checkpoint("payload checksum mismatch".into()));
    }
    let mut model = DiffSrModel::new(header.model.clone())?;
    if model.params.specs != header.params {
        return Err(NetError::Checkpoint("parameter layout does not match the architecture".into()));
    }
    let n = model.params.n_scalars();
    if body.len() != 4 * n {
        return Err(NetError::Checkpoint(format!("payload has {} bytes, expected {}", body.len(), 4 * n)));
    }
    let mut rb = body;
    let flat: Vec<f64> = (0..n)
        .map(|_| rb.read_f32::<LittleEndian>().map(f64::from))
        .collect::<std::io::Result<_>>()
        .map_err(|e| NetError::Checkpoint(e.to_string()))?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(NetError::Checkpoint("non-finite parameter".into()));
    }
    model.params.set_flat(&flat);
    model.trained = header.trained;
    model.iterations = header.iterations;
    Ok((model, header))
}

pub fn save(path: impl AsRef<Path>, model: &DiffSrModel, seed: u64, loss_weights: &LossWeights) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model, seed, loss_weights)?;
    let mut f = std::fs::File::create(path).map_err(|e| NetError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| NetError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(DiffSrModel, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| NetError::io(path, e))?;
    decode(&bytes)
}
