//! Named parameter storage and the on-disk checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "LCAECKPT"
//! version      u32       CHECKPOINT_VERSION
//! meta_len     u32       byte length of the metadata block
//! meta         bytes     UTF-8 text (the model configuration as TOML)
//! entries      u32       number of arrays that follow
//! per array:
//!   kind       u8        0 = learnable parameter, 1 = buffer (running statistics)
//!   name_len   u32
//!   name       bytes     UTF-8
//!   ndim       u32
//!   dims       u64 × ndim
//!   data       f64 × prod(dims), row-major
//! ```
//!
//! Values are always stored as `f64`, whatever precision the network ran in.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use super::Real;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LCAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Learnable parameters plus non-learnable buffers, both keyed by name in
/// insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, ArrayD<T>>,
    buffers: IndexMap<String, ArrayD<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new(), buffers: IndexMap::new() }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Result<&ArrayD<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&ArrayD<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |m: &IndexMap<String, ArrayD<T>>| {
            m.iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::of(x.as_f64()))))
                .collect()
        };
        ParamStore { params: conv(&self.params), buffers: conv(&self.buffers) }
    }

    /// Replaces every array with the same-named array from `other`, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (target, source, kind) in [
            (&mut self.params, &other.params, "parameter"),
            (&mut self.buffers, &other.buffers, "buffer"),
        ] {
            for (name, dst) in target.iter_mut() {
                let src = source
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {kind} {name}")))?;
                if src.shape() != dst.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{kind} {name}: checkpoint shape {:?}, model shape {:?}",
                        src.shape(),
                        dst.shape()
                    )));
                }
                dst.assign(src);
            }
            if let Some(extra) = source.keys().find(|k| !target.contains_key(*k)) {
                return Err(Error::Checkpoint(format!("unexpected {kind} {extra} in checkpoint")));
            }
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, meta: &str) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&((self.params.len() + self.buffers.len()) as u32).to_le_bytes())?;
        for (kind, map) in [(0u8, &self.params), (1u8, &self.buffers)] {
            for (name, arr) in map {
                w.write_all(&[kind])?;
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&(arr.ndim() as u32).to_le_bytes())?;
                for &d in arr.shape() {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                for v in arr.iter() {
                    w.write_all(&v.as_f64().to_le_bytes())?;
                }
            }
        }
        w.flush()
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(file), meta)
            .map_err(|e| Error::io(path, e))
    }
}

impl ParamStore<f64> {
    /// Parses a checkpoint, returning the store and its metadata text.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, String)> {
        let bad = |what: &str| Error::Checkpoint(what.to_owned());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let meta = String::from_utf8(read_bytes(&mut r, meta_len)?).map_err(|_| bad("metadata is not UTF-8"))?;
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let kind = read_bytes(&mut r, 1)?[0];
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, name_len)?).map_err(|_| bad("array name is not UTF-8"))?;
            let ndim = read_u32(&mut r)? as usize;
            let dims = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let raw = read_bytes(&mut r, len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            match kind {
                0 => store.insert_param(name, arr),
                1 => store.insert_buffer(name, arr),
                k => return Err(Error::Checkpoint(format!("unknown array kind {k}"))),
            }
        }
        Ok((store, meta))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_bytes(r, 8)?.try_into().expect("8 bytes")))
}
