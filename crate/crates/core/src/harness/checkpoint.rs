//! Binary checkpoint files.
//!
//! ```text
//! "FTCK"  u32 version (= 1)  u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 ndim, ndim × u32 dims,
//!             row-major f64 data
//! ```
//!
//! All integers and floats are little-endian. Tensors are written in the
//! map's (lexicographic) order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamMap;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTCK";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParamMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len()).map_err(|_| Error::InvalidArgument("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let len =
            u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("tensor name `{name}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ndim =
            u8::try_from(t.shape().len()).map_err(|_| Error::InvalidArgument(format!("`{name}` has too many dims")))?;
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("`{name}` dim {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated while reading {what} at byte {}", self.pos)),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N, what)?.try_into().expect("slice length"))
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<ParamMap, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = u32::from_le_bytes(r.array("tensor count")?);
    let mut params = ParamMap::new();
    for i in 0..count {
        let len = u16::from_le_bytes(r.array("name length")?) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format!("tensor {i}: name is not UTF-8"))?
            .to_string();
        let ndim = r.array::<1>("ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(r.array("dim")?) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format!("`{name}`: shape overflows"))?;
        let raw = r.take(numel.checked_mul(8).ok_or("size overflow")?, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| format!("`{name}`: {e}"))?;
        if params.contains(&name) {
            return Err(format!("duplicate tensor `{name}`"));
        }
        params.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(params)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamMap> {
    decode(bytes).map_err(|reason| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_checkpoint(path: &Path, params: &ParamMap) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamMap> {
    decode_checkpoint(&std::fs::read(path)?, path)
}
