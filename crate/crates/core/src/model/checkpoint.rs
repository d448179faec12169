//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "NAICCKPT"
//! version      u32 LE
//! mode         u8       0 = autoregressive, 1 = non-autoregressive
//! config       8 × u64 LE (num_layers, model_dim, num_heads, ffn_dim,
//!                          vocab_size, num_agents, max_regions, feature_dim)
//! count        u64 LE
//! count × { name_len u32 LE, name utf-8, rank u32 LE, dims rank × u64 LE,
//!           values numel × f64 LE }
//! ```
//! Tensors are written in name order, so equal models produce equal bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, Parameters};
use crate::autodiff::{Tensor, TensorMap};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NAICCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodingMode {
    Autoregressive,
    NonAutoregressive,
}

/// A model together with the decoding mode it was trained for.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub mode: DecodingMode,
    pub model: Model,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, mode: DecodingMode, model: &Model) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[match mode {
        DecodingMode::Autoregressive => 0,
        DecodingMode::NonAutoregressive => 1,
    }])?;
    let c = &model.config;
    for v in [
        c.num_layers,
        c.model_dim,
        c.num_heads,
        c.ffn_dim,
        c.vocab_size,
        c.num_agents,
        c.max_regions,
        c.feature_dim,
    ] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    let tensors = model.params.tensors();
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| bad(e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| bad(e.to_string()))?;
    Ok(u64::from_le_bytes(b))
}

const MAX_DIM: u64 = 1 << 24;

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut mode = [0u8; 1];
    r.read_exact(&mut mode).map_err(|e| bad(e.to_string()))?;
    let mode = match mode[0] {
        0 => DecodingMode::Autoregressive,
        1 => DecodingMode::NonAutoregressive,
        m => return Err(bad(format!("unknown decoding mode {m}"))),
    };
    let mut dims = [0usize; 8];
    for d in dims.iter_mut() {
        let v = read_u64(r)?;
        if v > MAX_DIM {
            return Err(bad(format!("config value {v} out of range")));
        }
        *d = v as usize;
    }
    let config = ModelConfig {
        num_layers: dims[0],
        model_dim: dims[1],
        num_heads: dims[2],
        ffn_dim: dims[3],
        vocab_size: dims[4],
        num_agents: dims[5],
        max_regions: dims[6],
        feature_dim: dims[7],
    };
    config.validate()?;
    let count = read_u64(r)?;
    let mut tensors = TensorMap::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > 256 {
            return Err(bad("tensor name too long"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let rank = read_u32(r)? as usize;
        if rank > 4 {
            return Err(bad(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = read_u64(r)?;
            if d > MAX_DIM {
                return Err(bad(format!("tensor {name} dimension {d} out of range")));
            }
            shape.push(d as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw).map_err(|e| bad(e.to_string()))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    let params = Parameters::from_map(&config, tensors)?;
    Ok(Checkpoint {
        mode,
        model: Model::new(config, params)?,
    })
}

pub fn checkpoint_bytes(mode: DecodingMode, model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, mode, model).expect("writing to a Vec cannot fail");
    buf
}

/// Writes via a temporary sibling and rename, so a failed save never leaves
/// a truncated checkpoint behind.
pub fn save_checkpoint(path: &Path, mode: DecodingMode, model: &Model) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, checkpoint_bytes(mode, model))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}
