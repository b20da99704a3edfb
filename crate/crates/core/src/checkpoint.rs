//! Self-describing parameter archives.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "TROTCKPT"
//! version    u32
//! meta_len   u32, followed by a UTF-8 TOML document (CheckpointMeta)
//! n_tensors  u32
//! per tensor, in name order:
//!   name_len u32, name bytes
//!   dtype    u8 (1 = f32, 2 = f64)
//!   ndim     u32, then ndim × u64 dims
//!   data     raw values
//! ```

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::{check_encoder_layout, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"TROTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

/// Parameter prefix under which the encoder lives in every checkpoint.
pub const ENCODER_PREFIX: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// `pretrain` or `finetune`.
    pub kind: String,
    pub framework: String,
    pub step: u64,
    pub encoder: EncoderConfig,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
}

fn dtype_code(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(DTYPE_F32),
        DType::F64 => Ok(DTYPE_F64),
        other => Err(Error::Config(format!("cannot store parameters of dtype {other:?}"))),
    }
}

pub fn encode_checkpoint(meta: &CheckpointMeta, store: &ParamStore) -> Result<Vec<u8>> {
    let meta_text = toml::to_string(meta).map_err(|e| Error::Config(e.to_string()))?;
    let code = dtype_code(store.dtype())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, var) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(code);
        let dims = var.dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let flat = var.as_tensor().flatten_all()?;
        match code {
            DTYPE_F32 => {
                for x in flat.to_vec1::<f32>()? {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            _ => {
                for x in flat.to_vec1::<f64>()? {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::format(self.path, field, "file truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { path, bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::format(path, "magic", "not a checkpoint"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, "version", format!("unsupported schema version {version}")));
    }
    let meta_len = c.u32("meta_len")? as usize;
    let meta_text = std::str::from_utf8(c.take(meta_len, "meta")?)
        .map_err(|e| Error::format(path, "meta", e.to_string()))?;
    let meta: CheckpointMeta =
        toml::from_str(meta_text).map_err(|e| Error::format(path, "meta", e.to_string()))?;
    let n = c.u32("n_tensors")?;
    let mut store: Option<ParamStore> = None;
    for _ in 0..n {
        let name_len = c.u32("name_len")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|e| Error::format(path, "name", e.to_string()))?
            .to_string();
        let code = c.take(1, "dtype")?[0];
        let dtype = match code {
            DTYPE_F32 => DType::F32,
            DTYPE_F64 => DType::F64,
            other => return Err(Error::format(path, "dtype", format!("unknown code {other}"))),
        };
        let store = store.get_or_insert_with(|| ParamStore::new(dtype));
        if store.dtype() != dtype {
            return Err(Error::format(path, "dtype", format!("`{name}` mixes dtypes")));
        }
        let ndim = c.u32("ndim")? as usize;
        let dims: Vec<usize> = (0..ndim)
            .map(|_| c.u64("dims").map(|d| d as usize))
            .collect::<Result<_>>()?;
        let count: usize = dims.iter().product();
        let t = if dtype == DType::F32 {
            let data: Vec<f32> = c
                .take(count * 4, &name)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Tensor::from_vec(data, dims, &Device::Cpu)?
        } else {
            let data: Vec<f64> = c
                .take(count * 8, &name)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Tensor::from_vec(data, dims, &Device::Cpu)?
        };
        if store.contains(&name) {
            return Err(Error::format(path, "name", format!("duplicate tensor `{name}`")));
        }
        store.insert(name, t)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "tail", format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let store = store.unwrap_or_else(|| ParamStore::new(DType::F64));
    Ok(Checkpoint { meta, store })
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, store: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode_checkpoint(meta, store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

/// Load a checkpoint and check that its encoder matches `expected`, both in
/// the recorded config and in every parameter shape.
pub fn load_encoder_checkpoint(path: &Path, expected: &EncoderConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.meta.encoder != expected {
        return Err(Error::CheckpointMismatch(format!(
            "{} was written for a different encoder config",
            path.display()
        )));
    }
    check_encoder_layout(expected, &ckpt.store, ENCODER_PREFIX)?;
    Ok(ckpt)
}
