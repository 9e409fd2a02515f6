//! Single-file checkpoints: a length-prefixed JSON header followed by the
//! little-endian f32 payload of every named parameter.
//!
//! Layout: `[u64 LE header length][header JSON][payload]`. Tensor offsets
//! in the header are counted in f32 elements from the start of the payload.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MoeModel};
use crate::param::Parameters;
use crate::tensor::Tensor;
use crate::train::AdaptationRegime;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub regime: Option<AdaptationRegime>,
    pub prompt_len: usize,
    pub sigma: Option<f32>,
    pub seed: u64,
    pub epoch: Option<usize>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl CheckpointMeta {
    pub fn for_model(model: &MoeModel, seed: u64) -> Self {
        Self {
            config: model.config,
            regime: None,
            prompt_len: model.prompt_len(),
            sigma: model.prompts.as_ref().map(|p| p.sigma),
            seed,
            epoch: None,
            metrics: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &MoeModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let params = model.params();
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for p in &params {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            len: p.numel(),
        });
        offset += p.numel();
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + 4 * offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in &params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let truncated = || Error::Data("checkpoint is truncated".into());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(truncated)?.try_into().expect("8 bytes");
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| truncated())?;
    let end = 8usize.checked_add(header_len).ok_or_else(truncated)?;
    let header: CheckpointHeader = serde_json::from_slice(bytes.get(8..end).ok_or_else(truncated)?)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }
    Ok((header, &bytes[end..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(MoeModel, CheckpointMeta)> {
    let (header, payload) = read_header(bytes)?;
    if payload.len() % 4 != 0 {
        return Err(Error::Data("checkpoint payload is not a whole number of f32".into()));
    }
    let n_floats = payload.len() / 4;
    let meta = header.meta;
    let mut model = MoeModel::new(meta.config, meta.seed)?;
    if meta.prompt_len > 0 {
        model.attach_prompts(meta.prompt_len, meta.sigma.unwrap_or(crate::prompt::DEFAULT_SIGMA), meta.seed)?;
    }
    let mut stored: HashMap<&str, &TensorEntry> = HashMap::with_capacity(header.tensors.len());
    for t in &header.tensors {
        if stored.insert(t.name.as_str(), t).is_some() {
            return Err(Error::Data(format!("duplicate tensor {:?} in checkpoint", t.name)));
        }
    }
    let expected = model.param_count();
    let mut seen = 0;
    for p in model.params_mut() {
        let t = stored
            .remove(p.name.as_str())
            .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {:?}", p.name)))?;
        if t.shape != p.value.shape() || t.len != p.numel() {
            return Err(Error::Shape {
                op: "checkpoint",
                lhs: t.shape.clone(),
                rhs: p.value.shape().to_vec(),
            });
        }
        let end = t.offset.checked_add(t.len).filter(|&e| e <= n_floats).ok_or_else(|| {
            Error::Data(format!("tensor {:?} runs past the checkpoint payload", t.name))
        })?;
        let data = payload[4 * t.offset..4 * end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        p.value = Tensor::new(t.shape.clone(), data)
            .map_err(|_| Error::NonFinite { op: "checkpoint load" })?;
        seen += t.len;
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::Data(format!("checkpoint holds unknown tensor {name:?}")));
    }
    debug_assert_eq!(seen, expected);
    Ok((model, meta))
}

pub fn save(path: &Path, model: &MoeModel, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(model, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(MoeModel, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
