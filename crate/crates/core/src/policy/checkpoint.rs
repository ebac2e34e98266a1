//! Binary checkpoint container: magic, format version, a JSON metadata
//! header, then named tensors as shape-prefixed little-endian `f64` arrays.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParameterSet, PolicyOptions, PolicyParameters, PromptPgParameters};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FLEXSDR\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Policy,
    PromptPg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: ModelKind,
    pub dim: usize,
    pub hidden: usize,
    /// Parameters do not depend on bank size; any bank of matching
    /// dimension can be scored.
    pub bank_agnostic: bool,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<PolicyOptions>,
}

impl CheckpointMeta {
    pub fn for_policy(p: &PolicyParameters, config_hash: impl Into<String>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            kind: ModelKind::Policy,
            dim: p.dim,
            hidden: p.hidden,
            bank_agnostic: true,
            config_hash: config_hash.into(),
            options: Some(p.options),
        }
    }

    pub fn for_promptpg(p: &PromptPgParameters, config_hash: impl Into<String>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            kind: ModelKind::PromptPg,
            dim: p.dim,
            hidden: p.hidden,
            bank_agnostic: true,
            config_hash: config_hash.into(),
            options: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

pub fn encode_checkpoint<P: ParameterSet>(params: &P, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(64 + header.len() + 8 * params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, values) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in &shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint<P: ParameterSet>(params: &P, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(params, meta)?).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CheckpointFormat("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::CheckpointFormat(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CheckpointFormat("tensor too large".into()))?;
        let raw = r.take(
            len.checked_mul(8)
                .ok_or_else(|| Error::CheckpointFormat("tensor too large".into()))?,
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(NamedTensor { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointFormat("trailing bytes".into()));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn fill<P: ParameterSet>(mut target: P, ckpt: &Checkpoint) -> Result<P> {
    let expected: Vec<(String, Vec<usize>)> = target
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n.to_string(), s))
        .collect();
    if expected.len() != ckpt.tensors.len() {
        return Err(Error::CheckpointShape(format!(
            "expected {} tensors, found {}",
            expected.len(),
            ckpt.tensors.len()
        )));
    }
    for ((name, shape), t) in expected.iter().zip(&ckpt.tensors) {
        if *name != t.name || *shape != t.shape {
            return Err(Error::CheckpointShape(format!(
                "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                t.name, t.shape
            )));
        }
    }
    for ((_, dst), t) in target.tensors_mut().into_iter().zip(&ckpt.tensors) {
        dst.copy_from_slice(&t.values);
    }
    if !target.is_finite() {
        return Err(Error::NonFinite("checkpoint tensors".into()));
    }
    Ok(target)
}

fn check_expected_dim(meta: &CheckpointMeta, expected_dim: Option<usize>) -> Result<()> {
    match expected_dim {
        Some(d) if d != meta.dim => Err(Error::CheckpointShape(format!(
            "checkpoint embedding dimension {} does not match expected {d}",
            meta.dim
        ))),
        _ => Ok(()),
    }
}

pub fn load_policy(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<(PolicyParameters, CheckpointMeta)> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.meta.kind != ModelKind::Policy {
        return Err(Error::CheckpointShape(
            "checkpoint does not hold a sequential policy".into(),
        ));
    }
    check_expected_dim(&ckpt.meta, expected_dim)?;
    let options = ckpt.meta.options.unwrap_or_default();
    let params = fill(PolicyParameters::zeros(ckpt.meta.dim, ckpt.meta.hidden, options), &ckpt)?;
    Ok((params, ckpt.meta))
}

pub fn load_promptpg(
    path: impl AsRef<Path>,
    expected_dim: Option<usize>,
) -> Result<(PromptPgParameters, CheckpointMeta)> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.meta.kind != ModelKind::PromptPg {
        return Err(Error::CheckpointShape(
            "checkpoint does not hold a PromptPG scorer".into(),
        ));
    }
    check_expected_dim(&ckpt.meta, expected_dim)?;
    let params = fill(PromptPgParameters::zeros(ckpt.meta.dim, ckpt.meta.hidden), &ckpt)?;
    Ok((params, ckpt.meta))
}
