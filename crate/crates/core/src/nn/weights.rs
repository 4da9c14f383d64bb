//! Versioned little-endian weight file.
//!
//! ```text
//! magic "MCDW" | u32 version | u32 entry count
//! per entry: u32 name length | name (UTF-8) | u32 rank | u32 dims[rank] | f32 payload
//! ```
//!
//! The first entry is `meta.architecture`, which rebuilds the layer stack
//! before the remaining entries are matched by name and shape.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::network::{Architecture, Network};

pub const MAGIC: &[u8; 4] = b"MCDW";
pub const VERSION: u32 = 1;
const META: &str = "meta.architecture";

pub fn write_weights<W: Write>(mut w: W, arch: &Architecture, net: &Network) -> Result<()> {
    let named = net.named();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(named.len() as u32 + 1).to_le_bytes())?;
    let meta = arch.to_meta();
    write_entry(&mut w, META, &[meta.len()], &meta)?;
    for n in &named {
        write_entry(&mut w, &n.name, &n.shape, n.data)?;
    }
    w.flush()?;
    Ok(())
}

fn write_entry<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::WeightFormat("truncated file".into())
    } else {
        Error::Io(e)
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn read_entry<R: Read>(r: &mut R) -> Result<Entry> {
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(Error::WeightFormat(format!("entry name length {len} too large")));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(truncated)?;
    let name = String::from_utf8(name).map_err(|_| Error::WeightFormat("entry name is not UTF-8".into()))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::WeightFormat(format!("rank {rank} too large for {name}")));
    }
    let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let count = count.filter(|&c| c <= 1 << 28).ok_or_else(|| Error::WeightFormat(format!("{name} too large")))?;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Entry { name, shape, data })
}

pub fn read_weights<R: Read>(mut r: R) -> Result<(Architecture, Network)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::WeightFormat("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let meta = read_entry(&mut r)?;
    if meta.name != META {
        return Err(Error::WeightFormat(format!("first entry must be {META}, got {}", meta.name)));
    }
    let arch = Architecture::from_meta(&meta.data)?;
    let mut net = arch.build(0)?;
    {
        let mut slots = net.named_mut();
        if count != slots.len() + 1 {
            return Err(Error::WeightFormat(format!(
                "architecture has {} tensors, file has {}",
                slots.len(),
                count.saturating_sub(1)
            )));
        }
        for slot in slots.iter_mut() {
            let e = read_entry(&mut r)?;
            if e.name != slot.name || e.shape != slot.shape {
                return Err(Error::WeightFormat(format!(
                    "expected {} {:?}, found {} {:?}",
                    slot.name, slot.shape, e.name, e.shape
                )));
            }
            if e.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::WeightFormat(format!("{} has non-finite values", e.name)));
            }
            slot.data.copy_from_slice(&e.data);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::WeightFormat("trailing bytes".into()));
    }
    Ok((arch, net))
}

pub fn save(path: &Path, arch: &Architecture, net: &Network) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_weights(std::io::BufWriter::new(f), arch, net)
}

pub fn load(path: &Path) -> Result<(Architecture, Network)> {
    let f = std::fs::File::open(path)?;
    read_weights(std::io::BufReader::new(f))
}
