//! WMNN model files.
//!
//! ```text
//! "WMNN"                      4 bytes magic
//! version                     u16 LE (currently 1)
//! descriptor length, bytes    u32 LE, then UTF-8 architecture text
//! metadata length, bytes      u32 LE, then UTF-8 JSON metadata
//! tensor count                u32 LE
//! per tensor: rank u32 LE, rank × u32 LE dims, then f32 LE values
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::arch::Architecture;
use super::model::{Model, ModelMetadata};
use super::tensor::Tensor;
use super::NnError;

pub const MAGIC: &[u8; 4] = b"WMNN";
pub const VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(model: &Model) -> Vec<u8> {
    let arch = model.arch().to_string();
    let meta = serde_json::to_string(&model.metadata).expect("metadata serialises");
    let mut out = Vec::with_capacity(64 + arch.len() + meta.len() + model.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, arch.len());
    out.extend_from_slice(arch.as_bytes());
    put_u32(&mut out, meta.len());
    out.extend_from_slice(meta.as_bytes());
    put_u32(&mut out, model.weights().len());
    for tensor in model.weights() {
        put_u32(&mut out, tensor.shape().len());
        for &d in tensor.shape() {
            put_u32(&mut out, d);
        }
        for v in tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<usize, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| NnError::Format("truncated model file".into()))?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_text(r: &mut Cursor<&[u8]>) -> Result<String, NnError> {
    let len = read_u32(r)?;
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(NnError::Format("truncated model file".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| NnError::Format("truncated model file".into()))?;
    String::from_utf8(buf).map_err(|_| NnError::Format("text block is not UTF-8".into()))
}

pub fn decode(bytes: &[u8]) -> Result<Model, NnError> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(NnError::Format("missing WMNN magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(NnError::Format(format!(
            "unsupported WMNN version {version}"
        )));
    }
    let mut r = Cursor::new(bytes);
    r.set_position(6);
    let arch: Architecture = read_text(&mut r)?.parse()?;
    let metadata: ModelMetadata = serde_json::from_str(&read_text(&mut r)?)
        .map_err(|e| NnError::Format(format!("bad metadata: {e}")))?;
    let count = read_u32(&mut r)?;
    if count != arch.param_shapes().len() {
        return Err(NnError::Format(format!(
            "file holds {count} tensors, architecture needs {}",
            arch.param_shapes().len()
        )));
    }
    let mut weights = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = read_u32(&mut r)?;
        if rank > 8 {
            return Err(NnError::Format(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let remaining = bytes.len() - r.position() as usize;
        if len.checked_mul(4).is_none_or(|n| n > remaining) {
            return Err(NnError::Format("truncated model file".into()));
        }
        let start = r.position() as usize;
        let values = bytes[start..start + 4 * len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        r.set_position((start + 4 * len) as u64);
        weights.push(Tensor::new(shape, values)?);
    }
    if r.position() as usize != bytes.len() {
        return Err(NnError::Format("trailing bytes after last tensor".into()));
    }
    Model::from_parts(arch, weights, metadata)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<(), NnError> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model, NnError> {
    decode(&fs::read(path)?)
}
