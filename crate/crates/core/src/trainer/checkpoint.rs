//! Versioned binary checkpoint container.
//!
//! Layout: magic `EVIQCKPT`, format version (u32 LE), payload length (u64
//! LE), payload, SHA-256 of the payload. All integers are little-endian and
//! every map is written in key order, so equal states give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::retrieval::index::hex;

const MAGIC: &[u8; 8] = b"EVIQCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    /// Resolved configuration as `key = value` text.
    pub config: String,
    /// Run seed and the number of optimizer steps taken; together they fix
    /// every random stream of the remaining run.
    pub seed: u64,
    pub step: u64,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
    /// Empirical prior per event group key.
    pub prior_table: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        p.push(self.stage);
        put_str(&mut p, &self.config);
        p.extend_from_slice(&self.seed.to_le_bytes());
        p.extend_from_slice(&self.step.to_le_bytes());
        p.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut p, k);
            put_str(&mut p, v);
        }
        p.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut p, name);
            p.push(DTYPE_F64);
            p.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                p.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                p.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        p.extend_from_slice(&(self.prior_table.len() as u64).to_le_bytes());
        for (k, row) in &self.prior_table {
            put_str(&mut p, k);
            p.extend_from_slice(&(row.len() as u64).to_le_bytes());
            for &x in row {
                p.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(p.len() + 52);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(&p);
        out.extend_from_slice(&Sha256::digest(&p));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        let digest = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checksum".into()));
        }
        if Sha256::digest(payload).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch: file is corrupted".into()));
        }

        let mut r = Reader { buf: payload, pos: 0 };
        let stage = r.take(1)?[0];
        let config = r.string()?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u64()? {
            let k = r.string()?;
            meta.insert(k, r.string()?);
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u64()? {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("tensor {name}: unsupported dtype {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw =
                r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("tensor {name}: size overflow")))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.insert(name, t);
        }
        let mut prior_table = BTreeMap::new();
        for _ in 0..r.u64()? {
            let k = r.string()?;
            let n = r.u64()? as usize;
            let raw = r.take(n * 8)?;
            prior_table.insert(
                k,
                raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect(),
            );
        }
        if r.pos != payload.len() {
            return Err(Error::Checkpoint("payload has trailing bytes".into()));
        }
        Ok(Self { stage, config, seed, step, meta, tensors, prior_table })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}
