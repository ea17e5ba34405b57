//! Binary checkpoint format.
//!
//! Layout: magic `PPC1`, `u32` record count, then per record a `u16` name
//! length, the UTF-8 name, a `u8` dtype code (0 = f32, 1 = f64), a `u8` rank,
//! `rank` `u32` dimensions and the little-endian data. All integers are
//! little-endian. Frozen tensors are listed as extra records named
//! `@frozen/<name>` with rank 1 and dimension 0; model hyperparameters are
//! rank-0 f64 records named `@meta/<key>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, PathContext, Result};
use crate::model::{Model, ModelConfig, ParamStore};

pub const MAGIC: &[u8; 4] = b"PPC1";
const FROZEN_PREFIX: &str = "@frozen/";
const META_PREFIX: &str = "@meta/";
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

fn record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let meta = model.config.to_meta();
    let params = &model.params;
    let count = meta.len() + params.len() + params.frozen_names().count();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (k, v) in meta {
        record(&mut out, &format!("{META_PREFIX}{k}"), &[], &[v]);
    }
    for (name, t) in params.iter() {
        let data: Vec<f64> = t.iter().copied().collect();
        record(&mut out, name, &[t.nrows(), t.ncols()], &data);
    }
    for name in params.frozen_names() {
        record(&mut out, &format!("{FROZEN_PREFIX}{name}"), &[0], &[]);
    }
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn corrupt(&self, at: usize, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            offset: at as u64,
            reason: reason.into(),
        }
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.corrupt(0, "bad magic"));
    }
    let count = r.u32("record count")?;
    let mut meta = BTreeMap::new();
    let mut params = ParamStore::new();
    let mut frozen = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.corrupt(at, "name is not UTF-8"))?
            .to_string();
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let n: usize = dims.iter().product();
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => r
                .take(n * 8, "f64 data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DTYPE_F32 => r
                .take(n * 4, "f32 data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => return Err(r.corrupt(at, format!("unknown dtype {other}"))),
        };
        if let Some(target) = name.strip_prefix(FROZEN_PREFIX) {
            frozen.push(target.to_string());
        } else if let Some(key) = name.strip_prefix(META_PREFIX) {
            if rank != 0 {
                return Err(r.corrupt(at, format!("meta record {key} must be scalar")));
            }
            meta.insert(key.to_string(), data[0]);
        } else {
            if rank != 2 {
                return Err(r.corrupt(at, format!("tensor {name} has rank {rank}, expected 2")));
            }
            let t = Array2::from_shape_vec((dims[0], dims[1]), data).expect("size checked");
            params.insert(name, t);
        }
    }
    if r.pos != buf.len() {
        return Err(r.corrupt(r.pos, "trailing bytes"));
    }
    for name in frozen {
        if !params.contains(&name) {
            return Err(Error::CorruptCheckpoint {
                offset: 0,
                reason: format!("frozen marker for unknown tensor {name}"),
            });
        }
        params.freeze(&name);
    }
    let config = ModelConfig::from_meta(&meta)?;
    Model::from_params(config, params)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_path(dir)?;
    }
    fs::write(path, to_bytes(model)).with_path(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path).with_path(path)?)
}
