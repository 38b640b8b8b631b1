//! Single-file parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RSAGCKPT"            8-byte magic
//! u32                   format version
//! u32 + bytes           code version string
//! u32 + bytes           configuration echo (JSON)
//! u64                   training step
//! u32                   tensor count
//! per tensor:
//!   u32 + bytes         name
//!   4 × u32             shape (N, C, H, W)
//!   f32 × len           values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"RSAGCKPT";
pub const FORMAT_VERSION: u32 = 1;
const MAX_STRING: u32 = 1 << 24;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub code_version: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub params: ParamStore<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode<T: Real>(config: &serde_json::Value, step: u64, params: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(params.scalar_count() * 4 + 4096);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_str(&mut out, crate::VERSION);
    put_str(&mut out, &serde_json::to_string(config)?);
    out.extend_from_slice(&step.to_le_bytes());
    put_u32(&mut out, params.len() as u32);
    for (_, name, t) in params.iter() {
        put_str(&mut out, name);
        for d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Write the archive, replacing `path` only once the file is complete.
pub fn save<T: Real>(path: &Path, config: &serde_json::Value, step: u64, params: &ParamStore<T>) -> Result<()> {
    let bytes = encode(config, step, params)?;
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("archive is truncated".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        if n > MAX_STRING {
            return Err(Error::Checkpoint(format!("string length {n} is implausible")));
        }
        String::from_utf8(self.take(n as usize)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let code_version = r.string()?;
    let config = serde_json::from_str(&r.string()?)?;
    let step = r.u64()?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if params.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
        }
        params.insert(&name, Tensor::from_vec(shape, data));
    }
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.bytes.len())));
    }
    Ok(Checkpoint {
        code_version,
        config,
        step,
        params,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::load(path, e))?;
    decode(&bytes).map_err(|e| Error::load(path, e))
}

impl Checkpoint {
    /// Copy stored tensors into `target`, which must hold exactly the same
    /// names and shapes.
    pub fn restore_into<T: Real>(&self, target: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != target.len() {
            return Err(Error::Checkpoint(format!(
                "archive holds {} tensors, model expects {}",
                self.params.len(),
                target.len()
            )));
        }
        let ids: Vec<_> = target.ids().collect();
        for id in ids {
            let name = target.name(id).to_string();
            let src = self
                .params
                .id(&name)
                .map(|i| self.params.get(i))
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' missing from archive")))?;
            let dst = target.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = T::from_f64_lossy(f64::from(s));
            }
        }
        Ok(())
    }
}
