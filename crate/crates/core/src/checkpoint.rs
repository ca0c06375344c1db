//! Binary checkpoint format.
//!
//! ```text
//! "PRFL" | u32 version | u32 header length | JSON header
//! u32 block count | per block: u16 name length, name, u32 rows, u32 cols,
//!                              rows*cols f64 values
//! ```
//!
//! All integers and floats are little-endian. The JSON header holds the model
//! hyperparameters, the normalization stats and the resolved run config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::datasets::NormStats;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PrismFlow};
use crate::numcore::ParamBlocks;

pub const MAGIC: &[u8; 4] = b"PRFL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    normalization: Option<NormStats>,
    #[serde(default)]
    resolved: serde_json::Value,
}

/// A decoded checkpoint: the model and the config of the run that made it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: PrismFlow,
    pub resolved: serde_json::Value,
}

pub fn encode(model: &PrismFlow, resolved: &serde_json::Value) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        normalization: model.normalization.clone(),
        resolved: resolved.clone(),
    })
    .expect("header serializes");
    let blocks = model.blocks();
    let mut out = Vec::with_capacity(16 + header.len() + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in &blocks {
        out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.rows as u32).to_le_bytes());
        out.extend_from_slice(&(b.cols as u32).to_le_bytes());
        for v in b.data {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

struct RawBlock<'a> {
    name: &'a str,
    rows: usize,
    cols: usize,
    payload: &'a [u8],
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    header.config.validate()?;

    let count = r.u32("block count")? as usize;
    // Each block needs at least 10 bytes of framing.
    if count > r.remaining() / 10 {
        return Err(Error::Format(format!("block count {count} exceeds file size")));
    }
    let mut raw = Vec::with_capacity(count);
    let mut total = 0usize;
    for i in 0..count {
        let name_len = r.u16("block name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "block name")?)
            .map_err(|_| Error::Format(format!("block {i} name is not UTF-8")))?;
        let rows = r.u32("block rows")? as usize;
        let cols = r.u32("block cols")? as usize;
        let bytes_len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("block {name} size overflows")))?;
        let payload = r.take(bytes_len, "block values")?;
        total += rows * cols;
        raw.push(RawBlock {
            name,
            rows,
            cols,
            payload,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    if header.config.param_count() != Some(total) {
        return Err(Error::Format(format!(
            "blocks hold {total} values, config implies {:?}",
            header.config.param_count()
        )));
    }

    let mut model = PrismFlow::zeros(header.config)?;
    {
        let mut blocks = model.blocks_mut();
        if blocks.len() != raw.len() {
            return Err(Error::Format(format!(
                "expected {} blocks, found {}",
                blocks.len(),
                raw.len()
            )));
        }
        for (dst, src) in blocks.iter_mut().zip(&raw) {
            if dst.name != src.name || dst.rows != src.rows || dst.cols != src.cols {
                return Err(Error::Format(format!(
                    "block {} ({}x{}) where {} ({}x{}) was expected",
                    src.name, src.rows, src.cols, dst.name, dst.rows, dst.cols
                )));
            }
            for (v, chunk) in dst.data.iter_mut().zip(src.payload.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                if !v.is_finite() {
                    return Err(Error::Format(format!("non-finite value in block {}", src.name)));
                }
            }
        }
    }
    if let Some(stats) = &header.normalization {
        stats.validate()?;
        if stats.channels() != model.config.channels {
            return Err(Error::Format("normalization channel count mismatch".into()));
        }
    }
    model.normalization = header.normalization;
    Ok(Checkpoint {
        model,
        resolved: header.resolved,
    })
}

pub fn save(path: &Path, model: &PrismFlow, resolved: &serde_json::Value) -> Result<()> {
    write_atomic(path, &encode(model, resolved))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
