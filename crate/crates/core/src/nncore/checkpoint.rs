//! Binary parameter container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   b"DEERCKPT"
//! version u32
//! hlen    u64        length of the JSON header
//! header  [u8; hlen] {"meta": ..., "tensors": [{"name", "rows", "cols"}]}
//! data    f64 × Σ rows·cols, tensors in header order, row-major
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a write/read round trip is
//! bit-exact.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tape::Param;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DEERCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode(meta: serde_json::Value, params: &[&Param]) -> Result<Vec<u8>> {
    let header = Header {
        meta,
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name().to_owned(),
                rows: p.shape().0,
                cols: p.shape().1,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(24 + header.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in params {
        for v in p.value().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, Vec<Param>)> {
    let fail = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body_start])?;
    let mut offset = body_start;
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n = t.rows * t.cols;
        let end = offset + 8 * n;
        if end > bytes.len() {
            return Err(fail(&format!("truncated tensor {}", t.name)));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset = end;
        let value =
            Array2::from_shape_vec((t.rows, t.cols), data).map_err(|e| fail(&e.to_string()))?;
        params.push(Param::new(t.name, value));
    }
    if offset != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    Ok((header.meta, params))
}
