//! Binary checkpoint container.
//!
//! ```text
//! "BOTN" | u32 version | u32 entry count
//! per entry: u32 name length | name bytes | u8 dtype | u32 rank | u64 extents.. | raw LE values
//! u32 metadata length | UTF-8 key=value lines
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BOTN";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;
pub const DTYPE_F32: u8 = 2;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

fn corrupt(entry: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint { entry: entry.to_string(), reason: reason.into() }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, entry: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(entry, "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, entry: &str) -> Result<u8> {
        Ok(self.take(1, entry)?[0])
    }

    fn u32(&mut self, entry: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, entry)?.try_into().unwrap()))
    }

    fn u64(&mut self, entry: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, entry)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "<header>")? != MAGIC {
            return Err(corrupt("<header>", "bad magic"));
        }
        let version = r.u32("<header>")?;
        if version != VERSION {
            return Err(corrupt("<header>", format!("unsupported version {version}")));
        }
        let count = r.u32("<header>")? as usize;
        let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let here = format!("<entry {i}>");
            let len = r.u32(&here)? as usize;
            let name = String::from_utf8(r.take(len, &here)?.to_vec()).map_err(|_| corrupt(&here, "name is not UTF-8"))?;
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(corrupt(&name, "duplicate name"));
            }
            let dtype = r.u8(&name)?;
            let rank = r.u32(&name)? as usize;
            if rank > 8 {
                return Err(corrupt(&name, format!("rank {rank} out of range")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&name)? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| corrupt(&name, "extent overflow"))?;
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => {
                    let raw = r.take(numel.checked_mul(8).ok_or_else(|| corrupt(&name, "size overflow"))?, &name)?;
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
                }
                DTYPE_F32 => {
                    let raw = r.take(numel.checked_mul(4).ok_or_else(|| corrupt(&name, "size overflow"))?, &name)?;
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
                }
                other => return Err(corrupt(&name, format!("unknown dtype code {other}"))),
            };
            let t = Tensor::new(&shape, data).map_err(|e| corrupt(&name, e.to_string()))?;
            entries.push((name, t));
        }
        let len = r.u32("<metadata>")? as usize;
        let text = std::str::from_utf8(r.take(len, "<metadata>")?).map_err(|_| corrupt("<metadata>", "not UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| corrupt("<metadata>", format!("line `{line}` is not key=value")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        if r.pos != buf.len() {
            return Err(corrupt("<metadata>", "trailing bytes"));
        }
        Ok(Checkpoint { entries, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
