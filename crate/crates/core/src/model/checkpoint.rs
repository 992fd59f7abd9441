//! Binary checkpoint container.
//!
//! ```text
//! "TUPE" | version u32 | header_len u32 | header (UTF-8 JSON)
//! repeated until EOF:
//!   name_len u32 | name | dtype u8 (0 = f32, 1 = f64) | rank u32 | dims u64 * rank | payload
//! ```
//!
//! All integers and payloads are little-endian.

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TUPE";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format: {0}")]
    UnsupportedFormat(String),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unknown tensor {0}")]
    UnknownTensor(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A named tensor as stored on disk. `F32` values are held widened to `f64`,
/// which is exact, so they narrow back without loss.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub header: String,
    pub tensors: Vec<StoredTensor>,
}

pub fn encode(raw: &RawCheckpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(raw.header.len() as u32).to_le_bytes());
    out.extend_from_slice(raw.header.as_bytes());
    for t in &raw.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype.code());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            match t.dtype {
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(len).ok_or(CheckpointError::Truncated(what))?;
        let slice = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| CheckpointError::UnsupportedFormat("file too short for magic".into()))?;
    if magic != MAGIC {
        return Err(CheckpointError::UnsupportedFormat(format!("bad magic {magic:02x?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedFormat(format!(
            "version {version}, expected {VERSION}"
        )));
    }
    let header_len = r.u32("header length")? as usize;
    let header = std::str::from_utf8(r.take(header_len, "header")?)
        .map_err(|e| CheckpointError::Malformed(format!("header is not UTF-8: {e}")))?
        .to_string();
    let mut tensors = Vec::new();
    while !r.done() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| CheckpointError::Malformed(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let dtype = match r.take(1, "dtype")?[0] {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(CheckpointError::Malformed(format!("tensor {name}: unknown dtype {other}"))),
        };
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name}: shape overflows")))?;
        let payload = r.take(
            len.checked_mul(dtype.width()).ok_or(CheckpointError::Truncated("payload"))?,
            "payload",
        )?;
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        tensors.push(StoredTensor { name, dtype, shape, data });
    }
    Ok(RawCheckpoint { header, tensors })
}
