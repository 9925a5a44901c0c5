//! Checkpoint container: magic "ACFW", version u32, then repeated sections of
//! [name length u16, name bytes, rank u8, dims u32 x rank, f32 data], all
//! little-endian. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::optim::ParamStore;
use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACFW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic (expected ACFW)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn write_checkpoint(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<std::ops::Range<usize>, CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let r = *pos..*pos + n;
        *pos += n;
        Ok(r)
    };

    let magic = take(&mut pos, 4, "magic")?;
    if &bytes[magic] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let vr = take(&mut pos, 4, "version")?;
    let version = u32::from_le_bytes(bytes[vr].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }

    let mut out = BTreeMap::new();
    while pos < bytes.len() {
        let lr = take(&mut pos, 2, "name length")?;
        let nlen = u16::from_le_bytes(bytes[lr].try_into().unwrap()) as usize;
        let nr = take(&mut pos, nlen, "name")?;
        let name = String::from_utf8_lossy(&bytes[nr]).into_owned();
        let rr = take(&mut pos, 1, "rank")?;
        let rank = bytes[rr][0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let dr = take(&mut pos, 4, "dims")?;
            shape.push(u32::from_le_bytes(bytes[dr].try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let dr = take(&mut pos, 4 * n, &format!("data of '{name}'"))?;
        let data: Vec<f32> = bytes[dr]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name, Tensor::new(shape, data));
    }
    Ok(out)
}
