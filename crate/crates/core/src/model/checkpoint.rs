//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "PCOVCKPT"
//! version      u32      1
//! float width  u8       4 or 8
//! config       u32 length + UTF-8 key=value text
//! count        u32
//! per tensor:  u16 name length, name, u32 rows, u32 cols,
//!              u32 crc32 of the data bytes, data
//! ```

use std::path::Path;

use super::params::ModelParams;
use super::tensor::Tensor;
use super::{parse_key_values, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PCOVCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatWidth {
    F32,
    F64,
}

impl FloatWidth {
    fn bytes(self) -> u8 {
        match self {
            FloatWidth::F32 => 4,
            FloatWidth::F64 => 8,
        }
    }
}

pub fn save_checkpoint(params: &ModelParams, width: FloatWidth) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(width.bytes());
    let config = params.config.to_key_values();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (t, spec) in params.tensors.iter().zip(params.specs()) {
        out.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        let data: Vec<u8> = match width {
            FloatWidth::F32 => t
                .data
                .iter()
                .flat_map(|&x| (x as f32).to_le_bytes())
                .collect(),
            FloatWidth::F64 => t.data.iter().flat_map(|&x| x.to_le_bytes()).collect(),
        };
        out.extend_from_slice(&crc32fast::hash(&data).to_le_bytes());
        out.extend_from_slice(&data);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            version
        )));
    }
    let width = match r.u8()? {
        4 => FloatWidth::F32,
        8 => FloatWidth::F64,
        w => return Err(Error::Checkpoint(format!("unsupported float width {}", w))),
    };
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config = ModelConfig::from_map(&parse_key_values(text)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let crc = r.u32()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(width.bytes() as usize))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} too large", name)))?;
        let data = r.take(n)?;
        if crc32fast::hash(data) != crc {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch in tensor {}",
                name
            )));
        }
        let values = match width {
            FloatWidth::F32 => data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            FloatWidth::F64 => data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        tensors.push((name, Tensor::from_vec(rows, cols, values)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let params =
        ModelParams::from_tensors(&config, tensors.iter().map(|(_, t)| t.clone()).collect())?;
    for ((name, _), spec) in tensors.iter().zip(params.specs()) {
        if *name != spec.name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {}, found {}",
                spec.name, name
            )));
        }
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok(params)
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    width: FloatWidth,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, save_checkpoint(params, width)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams {
        let c = ModelConfig {
            d_model: 8,
            num_heads: 2,
            d_ff: 12,
            n_mels: 5,
            num_arrangers: 2,
            ..ModelConfig::default()
        };
        ModelParams::init(&c, 7).unwrap()
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let p = small();
        let q = load_checkpoint(&save_checkpoint(&p, FloatWidth::F64)).unwrap();
        assert_eq!(p.tensors, q.tensors);
        assert_eq!(p.config, q.config);
    }

    #[test]
    fn f32_round_trip_rounds_once() {
        let p = small();
        let bytes = save_checkpoint(&p, FloatWidth::F32);
        let q = load_checkpoint(&bytes).unwrap();
        for (a, b) in p.tensors.iter().zip(&q.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert_eq!(save_checkpoint(&q, FloatWidth::F32), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = save_checkpoint(&small(), FloatWidth::F32);
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(
            matches!(load_checkpoint(&bytes), Err(Error::Checkpoint(m)) if m.contains("checksum"))
        );
        let good = save_checkpoint(&small(), FloatWidth::F32);
        assert!(load_checkpoint(&good[..good.len() - 3]).is_err());
        assert!(load_checkpoint(b"not a checkpoint").is_err());
    }
}
