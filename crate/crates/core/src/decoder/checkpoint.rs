//! Single-file checkpoints and loss-curve CSV.
//!
//! Layout (little-endian): `FDEC`, `u32` header length, JSON header, then
//! for each block `u32` name length, name bytes, `u32` element count and
//! that many `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecoderError, DecoderParams, EpochStats, Result};

const MAGIC: &[u8; 4] = b"FDEC";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dim: usize,
    /// Free-form configuration (training and encoder settings).
    pub config: serde_json::Value,
    pub blocks: Vec<BlockInfo>,
}

fn bad(msg: impl Into<String>) -> DecoderError {
    DecoderError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint(mut w: impl Write, params: &DecoderParams, config: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        format_version: 1,
        dim: params.dim(),
        config,
        blocks: params
            .block_shapes()
            .into_iter()
            .map(|(name, rows, cols)| BlockInfo {
                name: name.to_string(),
                rows,
                cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (name, data) in params.blocks() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(data.len() as u32).to_le_bytes())?;
        for &x in data {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(DecoderParams, CheckpointHeader)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a decoder checkpoint"));
    }
    let len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    if header.format_version != 1 {
        return Err(bad(format!("unsupported version {}", header.format_version)));
    }
    let mut params = DecoderParams::zeros(header.dim);
    for (name, block) in params.blocks_mut() {
        let name_len = read_u32(&mut r)? as usize;
        let mut stored = vec![0u8; name_len];
        r.read_exact(&mut stored)?;
        if stored != name.as_bytes() {
            return Err(bad(format!("expected block `{name}`, found `{}`", String::from_utf8_lossy(&stored))));
        }
        let count = read_u32(&mut r)? as usize;
        if count != block.len() {
            return Err(bad(format!("block `{name}` has {count} values, expected {}", block.len())));
        }
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw)?;
        for (dst, chunk) in block.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    Ok((params, header))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &DecoderParams, config: serde_json::Value) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params, config)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(DecoderParams, CheckpointHeader)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// `epoch,mean_loss,learning_rate` rows.
pub fn write_loss_csv(w: impl Write, curve: &[EpochStats]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in curve {
        out.serialize(row).map_err(|e| bad(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let p = DecoderParams::new(4, 9);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, serde_json::json!({"lr": 0.001})).unwrap();
        let (q, header) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(header.dim, 4);
        assert_eq!(header.config["lr"], 0.001);
        for ((_, a), (_, b)) in p.blocks().into_iter().zip(q.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(read_checkpoint(&b"NOPE\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn loss_csv_header() {
        let mut buf = Vec::new();
        let curve = [EpochStats {
            epoch: 0,
            mean_loss: 1.5,
            learning_rate: 0.001,
        }];
        write_loss_csv(&mut buf, &curve).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,mean_loss,learning_rate\n0,1.5,0.001\n");
    }
}
