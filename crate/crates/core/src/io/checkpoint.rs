//! `MPLT1` binary checkpoints.
//!
//! Layout, little-endian: magic `MPLT1`, version `u32`, tensor count `u32`,
//! then per tensor the name length `u32`, UTF-8 name, rank `u32`, each dim
//! as `u64`, and the values as `f64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ParamStore;
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MPLT1";
pub const VERSION: u32 = 1;

pub fn write_params(params: &ParamStore, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_params(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing MPLT1 magic".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("header")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = r.u32(&format!("tensor {i} name length"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("tensor {i} name"))?)
            .map_err(|e| Error::Format(format!("tensor {i} name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32(&format!("`{name}` rank"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64(&format!("`{name}` shape"))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Format(format!("`{name}` has an impossible shape {shape:?}")))?;
        let raw = r.take(numel * 8, &format!("`{name}` values"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_params(model.params(), &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads parameters and checks them against the shapes `config` implies.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let store = read_params(&bytes)?;
    if let Some(missing) = Model::param_specs(config).iter().find(|s| !store.contains(&s.name)) {
        return Err(Error::Format(format!("checkpoint lacks tensor `{}`", missing.name)));
    }
    Model::from_params(config.clone(), store)
}
