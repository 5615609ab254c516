//! Self-describing binary checkpoint.
//!
//! Layout, all integers little-endian:
//!   magic            8 bytes  "PREDEXCK"
//!   format version   u32      currently 1
//!   collection round u32      which training round produced the weights
//!   config length    u32      followed by that many bytes of JSON
//!   tensor count     u32
//!   per tensor:      name length u32, name bytes (UTF-8),
//!                    element count u32, elements as f32
//!
//! Tensor order and names are exactly what `ControlNet::named_tensors`
//! yields, batch norm running statistics included, so a load rebuilds the
//! precise inference state. Everything that affects the forward pass is
//! stored as f32, which is also the in-memory type: save, load, and forward
//! reproduce outputs bit-for-bit.

use super::{ControlNet, NetworkConfig};
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"PREDEXCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(net: &mut ControlNet, round: u32, path: &Path) -> Result<()> {
    let config_json = serde_json::to_vec(&net.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    let tensors = net.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                what: "checkpoint".into(),
                detail: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads a checkpoint, returning the network and the round it was trained
/// in. The tensor list must match the config-derived architecture exactly.
pub fn load_checkpoint(path: &Path) -> Result<(ControlNet, u32)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format {
            what: "checkpoint".into(),
            detail: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            what: "checkpoint".into(),
            detail: format!("unsupported version {version}"),
        });
    }
    let round = r.u32()?;
    let config_len = r.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::Format {
            what: "checkpoint".into(),
            detail: format!("config block: {e}"),
        })?;
    let mut net = ControlNet::new(config, 0)?;
    let count = r.u32()? as usize;
    let expected = net.named_tensors();
    if count != expected.len() {
        return Err(Error::Format {
            what: "checkpoint".into(),
            detail: format!("{count} tensors, architecture has {}", expected.len()),
        });
    }
    for (name, data) in expected {
        let name_len = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Format {
            what: "checkpoint".into(),
            detail: "non-UTF-8 tensor name".into(),
        })?;
        if got != name {
            return Err(Error::Format {
                what: "checkpoint".into(),
                detail: format!("expected tensor {name}, found {got}"),
            });
        }
        let n = r.u32()? as usize;
        if n != data.len() {
            return Err(Error::Format {
                what: "checkpoint".into(),
                detail: format!("tensor {name}: {n} elements, expected {}", data.len()),
            });
        }
        let bytes = r.take(n * 4)?;
        for (i, v) in data.iter_mut().enumerate() {
            *v = f32::from_le_bytes([
                bytes[4 * i],
                bytes[4 * i + 1],
                bytes[4 * i + 2],
                bytes[4 * i + 3],
            ]);
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            what: "checkpoint".into(),
            detail: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok((net, round))
}
