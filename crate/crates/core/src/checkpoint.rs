//! Binary parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        12 bytes  "RDGNN-CKPT-1"
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (model config and metadata)
//! n_tensors    u32
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes UTF-8, e.g. "phi_g.node_mlp.layer0.weight"
//!   ndim       u32
//!   dims       ndim × u64
//!   data       product(dims) × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 12] = b"RDGNN-CKPT-1";

pub fn encode(header: &serde_json::Value, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    let h = serde_json::to_vec(header).expect("header serializes");
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = t.shape();
        out.extend_from_slice(&2u32.to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} while reading {what}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} too large")))
    }
}

pub fn decode(buf: &[u8]) -> Result<(serde_json::Value, ParamStore)> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Version {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let hl = c.u32("header length")?;
    let header: serde_json::Value = serde_json::from_slice(c.take(hl, "header")?)?;
    let n = c.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let nl = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(nl, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = c.u32("ndim")?;
        let dims: Vec<usize> = (0..ndim).map(|_| c.u64("dim")).collect::<Result<_>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&k| k <= buf.len() / 8)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: implausible shape {dims:?}")))?;
        let raw = c.take(8 * count, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store.add(name, t)?;
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok((header, store))
}

pub fn save(path: &Path, header: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(header, store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}
