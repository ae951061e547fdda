//! Binary checkpoint format.
//!
//! ```text
//! "FBAS" | version u32 | flags u32 | block count u64
//! per block: name length u32 | name UTF-8 | offset u64 | len u64
//! array count u64 | arrays as little-endian f64, back to back
//! ```
//!
//! Flag bit 0 marks a major basis (stored last), bit 1 a single model.
//! Every integer is little-endian.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::nn::{Block, BlockSpec, ParamVector};
use crate::protocol::GlobalModel;

pub const MAGIC: &[u8; 4] = b"FBAS";
pub const VERSION: u32 = 1;
const FLAG_MAJOR: u32 = 1;
const FLAG_SINGLE: u32 = 2;

/// Bytes before the first payload.
pub fn header_len(spec: &BlockSpec) -> usize {
    4 + 4 + 4 + 8 + spec.blocks().iter().map(|b| 4 + b.name.len() + 16).sum::<usize>() + 8
}

pub fn encode(model: &GlobalModel) -> Vec<u8> {
    let (arrays, flags): (Vec<&ParamVector>, u32) = match model {
        GlobalModel::Single(p) => (vec![p], FLAG_SINGLE),
        GlobalModel::Bases(set) => (
            set.arrays().collect(),
            if set.has_major() { FLAG_MAJOR } else { 0 },
        ),
    };
    let spec = arrays[0].block_spec();
    let mut out = Vec::with_capacity(header_len(spec) + 8 * spec.total_len() * arrays.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(spec.num_blocks() as u64).to_le_bytes());
    for b in spec.blocks() {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.offset as u64).to_le_bytes());
        out.extend_from_slice(&(b.len as u64).to_le_bytes());
    }
    out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for a in arrays {
        for v in a.values() {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} overflows")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<GlobalModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes, not a checkpoint".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let flags = c.u32("flags")?;
    if flags & !(FLAG_MAJOR | FLAG_SINGLE) != 0 || flags == FLAG_MAJOR | FLAG_SINGLE {
        return Err(Error::Checkpoint(format!("invalid flags {flags:#x}")));
    }
    let num_blocks = c.usize("block count")?;
    let mut blocks = Vec::new();
    for _ in 0..num_blocks {
        let len = c.u32("block name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "block name")?)
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?
            .to_string();
        let offset = c.usize("block offset")?;
        let len = c.usize("block length")?;
        blocks.push(Block { name, offset, len });
    }
    let spec = Arc::new(BlockSpec::new(blocks).map_err(|e| Error::Checkpoint(format!("inconsistent block table: {e}")))?);
    let count = c.usize("array count")?;
    let single = flags & FLAG_SINGLE != 0;
    let major = flags & FLAG_MAJOR != 0;
    if (single && count != 1) || count == 0 || (major && count < 2) {
        return Err(Error::Checkpoint(format!("array count {count} does not match flags {flags:#x}")));
    }
    let payload = spec
        .total_len()
        .checked_mul(8 * count)
        .ok_or_else(|| Error::Checkpoint("payload size overflows".into()))?;
    let remaining = bytes.len() - c.pos;
    if remaining != payload {
        return Err(Error::Checkpoint(format!(
            "payload is {remaining} bytes, expected {payload} for {count} arrays of {} values",
            spec.total_len()
        )));
    }
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = c.take(8 * spec.total_len(), "parameters")?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        arrays.push(ParamVector::new(values, spec.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    if single {
        return Ok(GlobalModel::Single(arrays.pop().unwrap()));
    }
    let major = if major { arrays.pop() } else { None };
    Ok(GlobalModel::Bases(BasisSet::new(arrays, major)?))
}

pub fn write<W: Write>(model: &GlobalModel, mut writer: W) -> Result<()> {
    writer
        .write_all(&encode(model))
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn read<R: Read>(mut reader: R) -> Result<GlobalModel> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    decode(&bytes)
}

pub fn write_path(model: &GlobalModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn read_path(path: &Path) -> Result<GlobalModel> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Activation, MlpSpec};
    use crate::rng::RngSeed;

    fn set(major: bool) -> GlobalModel {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu).unwrap();
        let bases = (0..3).map(|k| init_params(&spec, RngSeed(k))).collect();
        GlobalModel::Bases(BasisSet::new(bases, major.then(|| init_params(&spec, RngSeed(9)))).unwrap())
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for m in [set(false), set(true), GlobalModel::Single(set(false).as_bases().unwrap().bases()[1].clone())] {
            assert_eq!(decode(&encode(&m)).unwrap(), m);
        }
    }

    #[test]
    fn size_follows_format() {
        let m = set(true);
        let spec = m.as_bases().unwrap().block_spec().clone();
        assert_eq!(encode(&m).len(), header_len(&spec) + 8 * spec.total_len() * 4);
    }

    #[test]
    fn truncation_and_corruption_are_errors() {
        let bytes = encode(&set(true));
        for cut in [0, 3, 7, 11, 30, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode(&bad).unwrap_err().to_string().contains("version"));
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
