//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DDPCKPT\0" | u32 version | 6 × u64 ModelConfig fields
//! u32 array count | per array: u32 name length, name bytes,
//!                   u32 rank, rank × u64 dims, prod(dims) × f64
//! ```

use std::io::{Read, Write};

use super::{ModelConfig, ParameterSet};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DDPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParameterSet) -> Result<()> {
    let c = &params.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [
        c.n_layers,
        c.n_heads,
        c.d_model,
        c.d_ff,
        c.vocab_size,
        c.max_seq_len,
    ] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    let layout = params.layout();
    w.write_all(&(layout.entries.len() as u32).to_le_bytes())?;
    for e in &layout.entries {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &dim in &e.shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in &params.values[e.range()] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(params: &ParameterSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + params.total_count() * 8);
    write_checkpoint(&mut buf, params).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParameterSet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut fields = [0usize; 6];
    for f in &mut fields {
        *f = read_u64(&mut r)? as usize;
    }
    let config = ModelConfig {
        n_layers: fields[0],
        n_heads: fields[1],
        d_model: fields[2],
        d_ff: fields[3],
        vocab_size: fields[4],
        max_seq_len: fields[5],
    };
    let mut params = ParameterSet::zeros(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let layout = params.layout();
    let count = read_u32(&mut r)? as usize;
    if count != layout.entries.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} arrays, found {count}",
            layout.entries.len()
        )));
    }
    for e in &layout.entries {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        if name != e.name.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected array `{}`, found `{}`",
                e.name,
                String::from_utf8_lossy(&name)
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        if shape != e.shape {
            return Err(Error::Checkpoint(format!(
                "array `{}` has shape {shape:?}, expected {:?}",
                e.name, e.shape
            )));
        }
        for v in &mut params.values[e.range()] {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok(params)
}
