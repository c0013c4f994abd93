//! Binary checkpoint format.
//!
//! ```text
//! b"XALNCKPT" | u32 version | u64 record count
//! per record: u32 key length | key bytes (UTF-8) | u32 rank | u64 dims[rank] | f64 data[prod(dims)]
//! ```
//! All integers and floats are little-endian; records are sorted by key.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"XALNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(records: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (k, t) in records {
        buf.extend_from_slice(&(k.len() as u32).to_le_bytes());
        buf.extend_from_slice(k.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let count = r.u64("record count")?;
    let mut out = BTreeMap::new();
    for i in 0..count {
        let klen = r.u32("key length")? as usize;
        let key = String::from_utf8(r.take(klen, "key")?.to_vec())
            .map_err(|_| Error::format(path, format!("record {i}: key is not UTF-8")))?;
        let rank = r.u32(&key)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&key)? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "record too large"))?, &key)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if out.insert(key.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint { key, msg: "duplicate key".into() });
        }
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after last record"));
    }
    Ok(out)
}
