//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PTRNCKP1"
//! config   u32 length + JSON-encoded NetworkConfig
//! count    u32 number of tensors
//! tensor   u32 name length, name bytes (UTF-8), u32 rank, rank × u64 dims,
//!          product(dims) × f64 payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PTRNCKP1";

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too large: {n}")))
}

pub fn write_to(net: &Network, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    let cfg = serde_json::to_vec(net.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(&u32_len(cfg.len(), "config record")?.to_le_bytes())?;
    w.write_all(&cfg)?;
    let named = net.params.named();
    w.write_all(&u32_len(named.len(), "tensor count")?.to_le_bytes())?;
    for (name, t) in named {
        w.write_all(&u32_len(name.len(), "tensor name")?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_len(t.rank(), "rank")?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<usize> {
    Ok(u32::from_le_bytes(read_exact(r, what)?) as usize)
}

fn read_bytes(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    Ok(buf)
}

pub fn read_from(r: &mut impl Read) -> Result<Network> {
    let magic: [u8; 8] = read_exact(r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let len = read_u32(r, "config length")?;
    let cfg_bytes = read_bytes(r, len, "config record")?;
    let cfg: NetworkConfig =
        serde_json::from_slice(&cfg_bytes).map_err(|e| Error::Checkpoint(format!("config record: {e}")))?;
    let count = read_u32(r, "tensor count")?;
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let n = read_u32(r, "name length")?;
        let name = String::from_utf8(read_bytes(r, n, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r, "rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(r, "dims")?) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = read_bytes(r, numel * 8, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        loaded.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }

    let mut net = Network::build(cfg.clone(), 0).map_err(|e| Error::Checkpoint(format!("config record: {e}")))?;
    let mut slots = net.params.named_mut();
    if slots.len() != loaded.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, file has {}", slots.len(), loaded.len())));
    }
    for ((want, slot), (name, t)) in slots.iter_mut().zip(loaded) {
        if *want != name {
            return Err(Error::Checkpoint(format!("expected tensor {want}, found {name}")));
        }
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, config implies {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        **slot = t;
    }
    Ok(net)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_from(&mut BufReader::new(f))
}
