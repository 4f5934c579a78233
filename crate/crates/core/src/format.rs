//! Byte-level codecs for `.atnp` attention stacks and `ATPW` probe checkpoints.
//!
//! `.atnp` layout (all integers little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `ATNP`                  |
//! | 4      | 1    | version (1)                   |
//! | 5      | 3    | reserved, zero                |
//! | 8      | 4    | `u32` n_blocks                |
//! | 12     | 4    | `u32` n_tokens                |
//! | 16     | 4    | `u32` height                  |
//! | 20     | 4    | `u32` width                   |
//! | 24     | 4·N  | `f32` payload, `[b, t, h, w]` |
//!
//! `ATPW` layout: magic, version, 3 reserved bytes, `u64` config
//! fingerprint, `u32` tensor count, then per tensor a `u16` name length,
//! UTF-8 name, `u32` value count and `f32` values.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::StackShape;
use crate::error::{bail, Error, Result};

pub const STACK_MAGIC: &[u8; 4] = b"ATNP";
pub const STACK_VERSION: u8 = 1;
pub const STACK_HEADER_LEN: usize = 24;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATPW";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Serializes a stack payload. `maps` must hold exactly `shape.len()` values.
pub fn encode_stack(shape: StackShape, maps: &[f32]) -> Result<Vec<u8>> {
    let len = shape
        .len()
        .ok_or_else(|| Error::Shape(alloc::format!("stack {shape} overflows")))?;
    if maps.len() != len {
        bail!(Shape, "payload has {} values, shape {shape} needs {len}", maps.len());
    }
    let mut out = Vec::with_capacity(STACK_HEADER_LEN + 4 * len);
    out.extend_from_slice(STACK_MAGIC);
    out.push(STACK_VERSION);
    out.extend_from_slice(&[0, 0, 0]);
    for dim in [shape.n_blocks, shape.n_tokens, shape.height, shape.width] {
        let dim = u32::try_from(dim).map_err(|_| Error::Shape(alloc::format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for v in maps {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses the fixed header, returning the declared shape.
pub fn decode_stack_header(bytes: &[u8]) -> Result<StackShape> {
    if bytes.len() < STACK_HEADER_LEN {
        return Err(Error::Truncated { expected: STACK_HEADER_LEN, found: bytes.len() });
    }
    if &bytes[0..4] != STACK_MAGIC {
        bail!(Format, "bad magic {:?}", &bytes[0..4]);
    }
    if bytes[4] != STACK_VERSION {
        bail!(Format, "unsupported version {}", bytes[4]);
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    Ok(StackShape::new(word(0), word(1), word(2), word(3)))
}

pub fn decode_stack(bytes: &[u8]) -> Result<(StackShape, Vec<f32>)> {
    let shape = decode_stack_header(bytes)?;
    let expected = shape
        .len()
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(STACK_HEADER_LEN))
        .ok_or_else(|| Error::Format(alloc::format!("declared shape {shape} overflows")))?;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        bail!(Format, "{} trailing bytes after payload", bytes.len() - expected);
    }
    let maps = bytes[STACK_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, maps))
}

/// A named weight tensor as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub values: Vec<f32>,
}

pub fn encode_checkpoint(fingerprint: u64, tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&fingerprint.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Argument(alloc::format!("tensor name too long: {}", t.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.values.len() as u32).to_le_bytes());
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated { expected: self.pos.saturating_add(n), found: self.bytes.len() }),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint into its fingerprint and tensors.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(u64, Vec<NamedTensor>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        bail!(Format, "bad checkpoint magic");
    }
    let version = cur.take(4)?[0];
    if version != CHECKPOINT_VERSION {
        bail!(Format, "unsupported checkpoint version {version}");
    }
    let fingerprint = cur.u64()?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = core::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .into();
        let len = cur.u32()? as usize;
        let raw = cur.take(len.checked_mul(4).ok_or_else(|| Error::Format("tensor length overflows".into()))?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(NamedTensor { name, values });
    }
    if cur.pos != bytes.len() {
        bail!(Format, "{} trailing bytes in checkpoint", bytes.len() - cur.pos);
    }
    Ok((fingerprint, tensors))
}

/// 64-bit FNV-1a, used for config fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
