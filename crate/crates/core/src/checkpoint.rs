//! DPCKPT weight files.
//!
//! Layout, little-endian throughout: magic `DPCKPT`, version `u16`, entry
//! count `u32`, then per entry in name order: name length `u32`, UTF-8
//! name, dtype `u8` (0 = f32), rank `u8`, dims `u32 × rank`, payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"DPCKPT";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Parameter groups a checkpoint may hold.
pub const GROUPS: [&str; 3] = ["base", "iea", "tca"];

fn check_name(name: &str) -> Result<()> {
    let group = name.split('.').next().unwrap_or_default();
    if name.len() > group.len() + 1 && GROUPS.contains(&group) {
        Ok(())
    } else {
        Err(Error::Format(format!("entry `{name}` is outside the base/iea/tca groups")))
    }
}

pub fn encode(params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * params.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        check_name(name)?;
        if t.rank() > u8::MAX as usize {
            return Err(Error::Format(format!("entry `{name}` has rank {}", t.rank())));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
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
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(6)? != MAGIC {
        return Err(Error::Format("not a DPCKPT file".into()));
    }
    let version = u16::from_le_bytes(c.array()?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(c.array()?) as usize;
    let mut params = ParamStore::new();
    let mut previous: Option<String> = None;
    for _ in 0..count {
        let len = u32::from_le_bytes(c.array()?) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        check_name(&name)?;
        if previous.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::Format(format!("entry `{name}` is out of order or repeated")));
        }
        let [dtype, rank] = c.array()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("entry `{name}` has unknown dtype {dtype}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(c.array()?) as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format(format!("entry `{name}` is implausibly large")))?;
        let data = c
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
            .collect();
        params.insert(name.clone(), Tensor::new(shape, data)?);
        previous = Some(name);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last entry".into()));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamStore<f32>) -> Result<()> {
    crate::image::write_bytes(path, &encode(params)?)
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    decode(&std::fs::read(path)?)
}
