//! Binary checkpoints of a [`ParamStore`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ISONASCK"
//! version    u32      1
//! entries    u32
//! manifest   per entry:
//!              name_len u32, name (utf-8)
//!              kind u8      0 weight, 1 bias, 2 bn gamma, 3 bn beta,
//!                           4 bn running mean, 5 bn running var
//!              frozen u8
//!              ndims u32, dims u64 * ndims
//!              offset u64   index of the first value in the data block
//!              length u64   number of values
//! data       f64 * total length
//! ```
//!
//! BN running statistics are stored as entries named `<bn>.running_mean`
//! and `<bn>.running_var`.

use std::io::{Read, Write};
use std::path::Path;

use super::params::{ParamRole, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ISONASCK";
pub const VERSION: u32 = 1;

const KIND_RUNNING_MEAN: u8 = 4;
const KIND_RUNNING_VAR: u8 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: u8,
    pub frozen: bool,
    pub dims: Vec<u64>,
    pub offset: u64,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        let mut push = |name: String, kind: u8, frozen: bool, dims: Vec<u64>, data: Vec<f64>| {
            let len = data.len() as u64;
            entries.push(Entry {
                name,
                kind,
                frozen,
                dims,
                offset,
                data,
            });
            offset += len;
        };
        for (_, p) in store.params() {
            push(
                p.name.clone(),
                p.role.code(),
                p.frozen,
                p.shape.iter().map(|&d| d as u64).collect(),
                p.data.clone(),
            );
        }
        for (_, bn) in store.bns() {
            let c = vec![bn.channels() as u64];
            push(
                format!("{}.running_mean", bn.name),
                KIND_RUNNING_MEAN,
                true,
                c.clone(),
                bn.running_mean.clone(),
            );
            push(
                format!("{}.running_var", bn.name),
                KIND_RUNNING_VAR,
                true,
                c,
                bn.running_var.clone(),
            );
        }
        Checkpoint { entries }
    }

    /// Copies values into a store with the same parameter names and sizes.
    /// Freeze flags in the store are left as they are.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        for e in &self.entries {
            match e.kind {
                KIND_RUNNING_MEAN | KIND_RUNNING_VAR => {
                    let suffix = if e.kind == KIND_RUNNING_MEAN {
                        ".running_mean"
                    } else {
                        ".running_var"
                    };
                    let bn_name = e.name.strip_suffix(suffix).ok_or_else(|| {
                        Error::Checkpoint(format!("malformed statistics entry `{}`", e.name))
                    })?;
                    let id = store
                        .find_bn(bn_name)
                        .ok_or_else(|| Error::Checkpoint(format!("unknown BN layer `{bn_name}`")))?;
                    let st = store.bn_mut(id);
                    let dst = if e.kind == KIND_RUNNING_MEAN {
                        &mut st.running_mean
                    } else {
                        &mut st.running_var
                    };
                    if dst.len() != e.data.len() {
                        return Err(Error::Checkpoint(format!("size mismatch for `{}`", e.name)));
                    }
                    dst.copy_from_slice(&e.data);
                }
                kind => {
                    ParamRole::from_code(kind)
                        .ok_or_else(|| Error::Checkpoint(format!("unknown entry kind {kind}")))?;
                    let id = store
                        .find(&e.name)
                        .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", e.name)))?;
                    let p = store.param_mut(id);
                    if p.data.len() != e.data.len() {
                        return Err(Error::Checkpoint(format!(
                            "`{}` has {} values, checkpoint has {}",
                            e.name,
                            p.data.len(),
                            e.data.len()
                        )));
                    }
                    p.data.copy_from_slice(&e.data);
                }
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.kind, e.frozen as u8])?;
            w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
            for d in &e.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            w.write_all(&e.offset.to_le_bytes())?;
            w.write_all(&(e.data.len() as u64).to_le_bytes())?;
        }
        for e in &self.entries {
            for v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut heads = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?;
            let kind = r.u8()?;
            let frozen = r.u8()? != 0;
            let nd = r.u32()? as usize;
            let dims = (0..nd).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            let len = r.u64()?;
            heads.push((name, kind, frozen, dims, offset, len));
        }
        let data_start = r.pos;
        let mut entries = Vec::with_capacity(heads.len());
        for (name, kind, frozen, dims, offset, len) in heads {
            let start = offset
                .checked_mul(8)
                .and_then(|o| o.checked_add(data_start as u64))
                .ok_or_else(|| Error::Checkpoint("offset overflow".into()))? as usize;
            let end = start
                .checked_add(len as usize * 8)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "entry `{name}` runs past end of file ({end} > {})",
                    bytes.len()
                )));
            }
            let data = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            entries.push(Entry {
                name,
                kind,
                frozen,
                dims,
                offset,
                data,
            });
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated header at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
