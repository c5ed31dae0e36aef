//! Named tensor archive for model weights.
//!
//! Layout (all integers little-endian):
//! `b"PCAMTNSR"`, `u32` version, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims and
//! `prod(dims) × f32` values. Batch-norm running statistics are stored
//! alongside the trainable parameters under their own names.

use std::fs;
use std::path::Path;

use prostacam_core::nn::resnet::{Classifier, LoadReport};

use crate::error::{PipelineError, Result};

pub const MAGIC: &[u8; 8] = b"PCAMTNSR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<NamedTensor>, String> {
    let mut c = Cursor { bytes, pos: 0 };
    let truncated = || "truncated checkpoint".to_string();
    if c.take(8) != Some(MAGIC.as_slice()) {
        return Err("not a prostacam checkpoint (bad magic)".into());
    }
    let version = c.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {}", version));
    }
    let count = c.u32().ok_or_else(truncated)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(c.take(len).ok_or_else(truncated)?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let rank = c.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(c.u64().ok_or_else(truncated)?).map_err(|_| truncated())?;
            n = n.checked_mul(d).ok_or_else(truncated)?;
            shape.push(d);
        }
        let raw = c.take(n.checked_mul(4).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err("trailing bytes after the last tensor".into());
    }
    Ok(out)
}

/// All parameters and buffers of a model, in network order.
pub fn model_tensors(model: &Classifier<f32>) -> Vec<NamedTensor> {
    model
        .network()
        .params()
        .entries()
        .iter()
        .map(|e| NamedTensor {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            data: e.value.data().to_vec(),
        })
        .collect()
}

pub fn save_model(path: &Path, model: &Classifier<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    fs::write(path, encode(&model_tensors(model))).map_err(|e| PipelineError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    decode(&bytes).map_err(|m| PipelineError::format(path, m))
}

/// Loads every tensor matching by name and shape into `model`.
pub fn load_into(path: &Path, model: &mut Classifier<f32>, reset_head: bool) -> Result<LoadReport> {
    let tensors = read_checkpoint(path)?;
    model
        .load_pretrained(
            tensors
                .iter()
                .map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice())),
            reset_head,
        )
        .map_err(|e| PipelineError::data(path, e))
}
