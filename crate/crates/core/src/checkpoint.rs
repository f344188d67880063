//! Versioned binary container for parameters and run state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"RADNCKPT"  u32 version
//! u32 len, UTF-8 config echo
//! u32 len, UTF-8 `key=value` metadata lines
//! u32 entry count, then per entry:
//!   u32 len, UTF-8 name   u32 ndim   u64 dim * ndim   f32 * numel
//! ```
//!
//! Entries keep their insertion order, so loading and re-saving reproduces
//! the file byte for byte.

use std::path::Path;

use indexmap::IndexMap;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RADNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    /// Echo of the effective run configuration.
    pub config: String,
    pub meta: IndexMap<String, String>,
    pub tensors: Params<f32>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key `{key}`")))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta_value(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{key}` has unreadable value `{raw}`")))
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Params<f32> {
        let mut p = Params::new();
        for (name, t) in self.tensors.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                p.insert(rest, t.clone());
            }
        }
        p
    }

    pub fn insert_prefixed(&mut self, prefix: &str, params: &Params<f32>) {
        for (name, t) in params.iter() {
            self.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &self.config);
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(&mut b, &meta);
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            put_str(&mut b, name);
            b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {VERSION})"
            )));
        }
        let config = r.string()?;
        let mut meta = IndexMap::new();
        for line in r.string()?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()?;
        let mut tensors = Params::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` has an absurd shape {shape:?}")))?;
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, meta, tensors })
    }

    /// Write atomically, so an interrupted save never clobbers a good file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}
