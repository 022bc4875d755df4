//! Binary parameter files.
//!
//! Layout, all integers little-endian: magic `FIR1`, `u32` version, `u32`
//! tensor count, then per tensor in byte-lexicographic name order: `u32` name
//! length, UTF-8 name, `u32` rank, `u64` extents, `u8` dtype tag (1 = f32,
//! 2 = f64), raw values.

use std::path::Path;

use fractal_ir::{DType, ParamStore, Scalar, Tensor};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"FIR1";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.parameter_count() * std::mem::size_of::<T>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(T::DTYPE as u8);
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<X>(&self, detail: impl Into<String>) -> Result<X> {
        Err(HarnessError::Format {
            offset: self.pos,
            detail: detail.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => self.fail(format!("truncated while reading {what}")),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a whole file; nothing is returned unless every tensor decodes.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("name length")? as usize;
        let name = match std::str::from_utf8(r.take(len, "name")?) {
            Ok(s) => s.to_string(),
            Err(_) => {
                r.pos = start + 4;
                return r.fail("name is not UTF-8");
            }
        };
        if last.as_deref().is_some_and(|l| l >= name.as_str()) {
            r.pos = start;
            return r.fail(format!("tensor `{name}` out of order or duplicated"));
        }
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(r.u64("extent")? as usize);
        }
        let tag = r.take(1, "dtype")?[0];
        if tag != T::DTYPE as u8 {
            r.pos -= 1;
            return r.fail(format!("dtype tag {tag}, expected {}", T::DTYPE as u8));
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(numel) = numel else {
            return r.fail("tensor size overflows");
        };
        let width = std::mem::size_of::<T>();
        let raw = r.take(numel.saturating_mul(width), "values")?;
        let data: Vec<T> = match T::DTYPE {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|b| T::from_f64(f64::from_le_bytes(b.try_into().unwrap())))
                .collect(),
        };
        let t = match Tensor::new(&shape, data) {
            Ok(t) => t,
            Err(e) => {
                r.pos = start;
                return r.fail(format!("tensor `{name}`: {e}"));
            }
        };
        store.insert(name.clone(), t);
        last = Some(name);
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes");
    }
    Ok(store)
}

pub fn save<T: Scalar>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| HarnessError::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode(&bytes)
}
