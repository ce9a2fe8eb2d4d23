//! Binary checkpoints: magic, little-endian u64 header length, JSON header,
//! then little-endian f64 payloads in directory order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainedModel, TrainingError};
use crate::config::RunConfig;
use crate::numerics::params::ParamId;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"MUTUDCK\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal string since JSON numbers cannot hold a u128.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub step: u64,
    pub skipped: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng, TrainingError> {
    use rand::SeedableRng;
    let bad = |m: &str| TrainingError::Checkpoint(format!("rng state: {m}"));
    let seed: [u8; 32] = hex::decode(&s.seed).map_err(|_| bad("seed"))?.try_into().map_err(|_| bad("seed length"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos.parse().map_err(|_| bad("word_pos"))?);
    Ok(rng)
}

/// Serialize the model, optimizer moments and data-order generator.
pub fn to_bytes(model: &TrainedModel) -> Result<Vec<u8>, TrainingError> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: &str, kind: TensorKind, t: &Tensor, tensors: &mut Vec<TensorEntry>| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind,
            dtype: "f64".into(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for e in model.store.entries() {
        let kind = if e.trainable { TensorKind::Param } else { TensorKind::Buffer };
        push(&e.name, kind, &e.tensor, &mut tensors);
    }
    for (i, e) in model.store.entries().iter().enumerate() {
        if let (Some(m), Some(v)) = (&model.optimizer.m[i], &model.optimizer.v[i]) {
            push(&e.name, TensorKind::AdamM, m, &mut tensors);
            push(&e.name, TensorKind::AdamV, v, &mut tensors);
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config_hash: model.config.hash(),
        config: model.config.clone(),
        step: model.optimizer.step,
        skipped: model.optimizer.skipped,
        rng: rng_state(&model.rng),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| TrainingError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Split a checkpoint into its parsed header and payload.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8]), TrainingError> {
    let bad = |m: String| TrainingError::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("format version {}", header.format_version)));
    }
    if header.config_hash != header.config.hash() {
        return Err(bad("embedded config does not match its hash".into()));
    }
    Ok((header, &bytes[end..]))
}

/// Rebuild a model. When `expected_hash` is given and differs from the
/// stored one the load is refused unless `force` is set.
pub fn from_bytes(bytes: &[u8], expected_hash: Option<&str>, force: bool) -> Result<TrainedModel, TrainingError> {
    let (header, payload) = read_header(bytes)?;
    if let Some(h) = expected_hash {
        if h != header.config_hash && !force {
            return Err(TrainingError::Checkpoint(format!(
                "config hash mismatch: checkpoint {} expected {h}",
                header.config_hash
            )));
        }
    }
    let mut model = TrainedModel::init(&header.config)?;
    let expected = model.store.len() + 2 * model.optimizer.m.iter().flatten().count();
    if header.tensors.len() != expected {
        return Err(TrainingError::Checkpoint(format!("{} tensors, expected {expected}", header.tensors.len())));
    }
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let bytes = payload
            .get(start..start + n * 8)
            .ok_or_else(|| TrainingError::Checkpoint(format!("payload truncated at {}", entry.name)))?;
        if entry.dtype != "f64" {
            return Err(TrainingError::Checkpoint(format!("dtype {} for {}", entry.dtype, entry.name)));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        let id: ParamId = model
            .store
            .find(&entry.name)
            .ok_or_else(|| TrainingError::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        let current = model.store.get(id).shape();
        if current != tensor.shape() {
            return Err(TrainingError::Checkpoint(format!("shape {:?} for {}, expected {current:?}", tensor.shape(), entry.name)));
        }
        let slot = match entry.kind {
            TensorKind::Param | TensorKind::Buffer => {
                model.store.set(id, tensor);
                continue;
            }
            TensorKind::AdamM => &mut model.optimizer.m[id.0],
            TensorKind::AdamV => &mut model.optimizer.v[id.0],
        };
        match slot {
            Some(t) => *t = tensor,
            None => return Err(TrainingError::Checkpoint(format!("moments for untrained {}", entry.name))),
        }
    }
    model.optimizer.step = header.step;
    model.optimizer.skipped = header.skipped;
    model.rng = restore_rng(&header.rng)?;
    Ok(model)
}

pub fn save(model: &TrainedModel, path: &Path) -> Result<(), TrainingError> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path, expected_hash: Option<&str>, force: bool) -> Result<TrainedModel, TrainingError> {
    from_bytes(&std::fs::read(path)?, expected_hash, force)
}
