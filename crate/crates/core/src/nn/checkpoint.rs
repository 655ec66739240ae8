//! Versioned binary checkpoints: parameters, optimizer moments, running
//! statistics, epoch counter and config hash.
//!
//! The format is opaque but stable: tensors are written in store order with
//! exact little-endian f32 bit patterns, so save -> load -> save reproduces
//! the file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, TensorKind};

const MAGIC: &[u8; 8] = b"SSVCKPT1";
const VERSION: u32 = 1;

/// Non-tensor metadata carried by a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub epoch: u64,
    pub adam_step: u64,
}

pub fn save(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut w, &meta.config_hash)?;
    w.write_all(&meta.epoch.to_le_bytes())?;
    w.write_all(&meta.adam_step.to_le_bytes())?;
    w.write_all(&(store.entries.len() as u32).to_le_bytes())?;
    for e in &store.entries {
        write_str(&mut w, &e.name)?;
        w.write_all(&[match e.kind {
            TensorKind::Param => 0u8,
            TensorKind::Buffer => 1u8,
        }])?;
        let dims = e.value.shape();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        write_f32s(&mut w, e.value.iter())?;
        if e.kind == TensorKind::Param {
            write_f32s(&mut w, e.m.iter())?;
            write_f32s(&mut w, e.v.iter())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint into a store built with the same architecture; tensor
/// names and shapes must match exactly.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<CheckpointMeta> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let config_hash = read_str(&mut r)?;
    let epoch = read_u64(&mut r)?;
    let adam_step = read_u64(&mut r)?;
    let n = read_u32(&mut r)? as usize;
    if n != store.entries.len() {
        return Err(Error::Data(format!(
            "checkpoint has {n} tensors, model expects {}",
            store.entries.len()
        )));
    }
    for e in &mut store.entries {
        let name = read_str(&mut r)?;
        if name != e.name {
            return Err(Error::Data(format!("tensor name mismatch: file {name}, model {}", e.name)));
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(&mut r)? as usize);
        }
        if dims != e.value.shape() {
            return Err(Error::Data(format!("tensor {name}: shape mismatch")));
        }
        read_f32s(&mut r, e.value.as_slice_mut().unwrap())?;
        if e.kind == TensorKind::Param {
            read_f32s(&mut r, e.m.as_slice_mut().unwrap())?;
            read_f32s(&mut r, e.v.as_slice_mut().unwrap())?;
        }
    }
    Ok(CheckpointMeta { config_hash, epoch, adam_step })
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f32s<'a, W: Write, I: Iterator<Item = &'a f32>>(w: &mut W, it: I) -> Result<()> {
    for &v in it {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
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

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Data("invalid utf8 in checkpoint".into()))
}

fn read_f32s<R: Read>(r: &mut R, out: &mut [f32]) -> Result<()> {
    let mut buf = vec![0u8; out.len() * 4];
    r.read_exact(&mut buf)?;
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        out[i] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(())
}
