//! Binary checkpoint format.
//!
//! ```text
//! "IVN1" | version u32 | config length u32 | config (key=value lines)
//! | tensor count u32 | tensors...
//! tensor: name length u16 | name | ndim u8 | dims u32 x ndim | f32 values
//! ```
//!
//! All integers and floats are little-endian. Batch-norm running statistics
//! are stored as `<layer>.running_mean` and `<layer>.running_var`.

use std::collections::HashMap;
use std::path::Path;

use super::{ArchConfig, Network};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IVN1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: impl Iterator<Item = f32>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `net` at `f32` precision.
pub fn encode_checkpoint<T: Element>(net: &Network<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = net.config().to_kv();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    let count = net.params().len() + 2 * net.running_stats().len();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    let f = |v: &T| v.as_f64() as f32;
    for p in net.params() {
        put_tensor(&mut buf, &p.name, p.value.shape(), p.value.data().iter().map(f));
    }
    for r in net.running_stats() {
        let c = r.stats.mean.len();
        put_tensor(&mut buf, &format!("{}.running_mean", r.name), &[c], r.stats.mean.iter().map(f));
        put_tensor(&mut buf, &format!("{}.running_var", r.name), &[c], r.stats.var.iter().map(f));
    }
    buf
}

pub fn save_checkpoint<T: Element>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let at = self.pos as u64;
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }
}

struct Stored {
    offset: u64,
    shape: Vec<usize>,
    values: Vec<f32>,
}

/// Parses a checkpoint produced by [`encode_checkpoint`].
pub fn decode_checkpoint(buf: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, not an IVN1 checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_at = r.pos as u64;
    let cfg = ArchConfig::from_kv(r.utf8(cfg_len, "config block")?)
        .map_err(|e| Error::format(cfg_at, e.to_string()))?;

    let count = r.u32("tensor count")?;
    let mut stored = HashMap::new();
    for _ in 0..count {
        let offset = r.pos as u64;
        let name_len = r.u16("tensor name length")? as usize;
        let name = r.utf8(name_len, "tensor name")?.to_owned();
        let ndim = r.u8("tensor rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = r
            .take(n * 4, "tensor values")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if stored.insert(name.clone(), Stored { offset, shape, values }).is_some() {
            return Err(Error::format(offset, format!("duplicate tensor {name:?}")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last tensor"));
    }

    let end = buf.len() as u64;
    let mut fetch = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let t = stored
            .remove(name)
            .ok_or_else(|| Error::format(end, format!("tensor {name:?} missing for this config")))?;
        if t.shape != shape {
            return Err(Error::format(
                t.offset,
                format!("tensor {name:?} has shape {:?}, config needs {shape:?}", t.shape),
            ));
        }
        Ok(t.values)
    };

    let mut net = Network::<f32>::build(&cfg, 0)?;
    for p in net.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::new(&shape, fetch(&p.name, &shape)?)?;
    }
    for s in net.running_stats_mut() {
        let c = s.stats.mean.len();
        s.stats.mean = fetch(&format!("{}.running_mean", s.name), &[c])?;
        s.stats.var = fetch(&format!("{}.running_var", s.name), &[c])?;
    }
    if let Some((name, t)) = stored.iter().min_by_key(|(_, t)| t.offset) {
        return Err(Error::format(t.offset, format!("unexpected tensor {name:?}")));
    }
    Ok(net)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network<f32>> {
    decode_checkpoint(&std::fs::read(path)?)
}
