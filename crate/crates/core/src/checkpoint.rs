//! Binary checkpoint container.
//!
//! ```text
//! "CFSN" | version u32 | header_len u64 | header JSON
//! | count u32 | count x { name_len u16 | name | dtype u8 | ndim u8 | dims u64 x ndim | offset u64 }
//! | data (little-endian f32, offsets relative to the start of this section)
//! ```
//! All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::degrade::DegradationSpec;
use crate::model::{CfsModel, ModelConfig};
use crate::tensor::Tensor;
use crate::train::Step2Variant;

pub const MAGIC: &[u8; 4] = b"CFSN";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor {0} appears more than once")]
    DuplicateTensor(String),
    #[error("tensor {0} is missing")]
    MissingTensor(String),
    #[error("tensor {0} is not part of the model")]
    UnknownTensor(String),
    #[error("tensor {name} has shape {got:?}, model expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("tensor {0} has unsupported dtype code {1}")]
    UnsupportedDtype(String, u8),
    #[error("tensor {0} data lies outside the data section or overlaps another tensor")]
    BadOffset(String),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic => "bad_magic",
            CheckpointError::UnsupportedVersion(_) => "unsupported_version",
            CheckpointError::Truncated(_) => "truncated",
            CheckpointError::DuplicateTensor(_) => "duplicate_tensor",
            CheckpointError::MissingTensor(_) => "missing_tensor",
            CheckpointError::UnknownTensor(_) => "unknown_tensor",
            CheckpointError::ShapeMismatch { .. } => "shape_mismatch",
            CheckpointError::UnsupportedDtype(..) => "unsupported_dtype",
            CheckpointError::BadOffset(_) => "bad_offset",
            CheckpointError::InvalidHeader(_) => "invalid_header",
            CheckpointError::Io(_) => "io",
        }
    }
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// How a checkpoint was produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Provenance {
    /// Highest training step completed: 0, 1 or 2.
    pub steps_completed: u8,
    pub step1_iterations: usize,
    pub step2_iterations: usize,
    pub endpoint_a: Option<DegradationSpec>,
    pub endpoint_b: Option<DegradationSpec>,
    pub step2_variant: Option<Step2Variant>,
    pub init_seed: Option<u64>,
    pub train_seeds: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    provenance: Provenance,
}

/// Serializes every parameter of `model` in model order.
pub fn encode(model: &CfsModel, provenance: &Provenance) -> Vec<u8> {
    let header = serde_json::to_vec(&Header { config: model.config().clone(), provenance: provenance.clone() })
        .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * p.tensor.len() as u64;
    }
    for p in model.params() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Parses a checkpoint and rebuilds the model it describes.
pub fn decode(bytes: &[u8]) -> Result<(CfsModel, Provenance)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = r.u64("header length")?;
    let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Truncated("header"))?;
    let header_bytes = r.take(header_len, "header")?;
    let text = std::str::from_utf8(header_bytes).map_err(|e| CheckpointError::InvalidHeader(e.to_string()))?;
    let header: Header = serde_json::from_str(text).map_err(|e| CheckpointError::InvalidHeader(e.to_string()))?;
    let template =
        CfsModel::build(header.config.clone(), 0).map_err(|e| CheckpointError::InvalidHeader(e.to_string()))?;

    let count = r.u32("tensor count")?;
    let mut entries: Vec<Entry> = Vec::new();
    for _ in 0..count {
        let len = r.u16("tensor name")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|e| CheckpointError::InvalidHeader(format!("tensor name: {e}")))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::UnsupportedDtype(name, dtype));
        }
        let ndim = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = r.u64("dims")?;
            shape.push(usize::try_from(d).map_err(|_| CheckpointError::BadOffset(name.clone()))?);
        }
        let offset = r.u64("offset")?;
        if entries.iter().any(|e| e.name == name) {
            return Err(CheckpointError::DuplicateTensor(name));
        }
        entries.push(Entry { name, shape, offset });
    }
    let data = &bytes[r.pos..];

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(entries.len());
    let mut tensors = Vec::with_capacity(entries.len());
    for e in &entries {
        let idx = template.param_index(&e.name).ok_or_else(|| CheckpointError::UnknownTensor(e.name.clone()))?;
        let expected = template.params()[idx].tensor.shape();
        if e.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: e.name.clone(),
                expected: expected.to_vec(),
                got: e.shape.clone(),
            });
        }
        let size = 4 * e.shape.iter().product::<usize>() as u64;
        let end = e.offset.checked_add(size).ok_or_else(|| CheckpointError::BadOffset(e.name.clone()))?;
        if end > data.len() as u64 {
            // A tensor running past the end of the file is a short file when
            // the directory is otherwise consistent.
            return Err(if e.offset <= data.len() as u64 {
                CheckpointError::Truncated("tensor data")
            } else {
                CheckpointError::BadOffset(e.name.clone())
            });
        }
        spans.push((e.offset, end, &e.name));
        let raw = &data[e.offset as usize..end as usize];
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), values).expect("shape checked")));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(CheckpointError::BadOffset(w[1].2.to_string()));
        }
    }
    if let Some(p) = template.params().iter().find(|p| !entries.iter().any(|e| e.name == p.name)) {
        return Err(CheckpointError::MissingTensor(p.name.clone()));
    }
    let model =
        CfsModel::with_tensors(header.config, tensors).map_err(|e| CheckpointError::InvalidHeader(e.to_string()))?;
    Ok((model, header.provenance))
}

pub fn save_checkpoint(model: &CfsModel, provenance: &Provenance, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model, provenance))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CfsModel, Provenance)> {
    decode(&std::fs::read(path)?)
}
