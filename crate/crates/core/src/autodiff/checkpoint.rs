//! Binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes   "STCCKPT\0"
//! version      u32       1
//! config_hash  u64
//! epoch        u32
//! count        u32       number of entries
//! entry × count:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   trainable  u8        0 | 1
//!   rank       u32       0..=3
//!   dims       u64 × rank
//!   values     f64 × product(dims)
//! ```
//!
//! Entries are written in lexicographic name order.

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::{Tensor, MAX_RANK};
use crate::error::{Error, Result};
use crate::io::ByteReader;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STCCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub epoch: u32,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::from(p.trainable));
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.error_at(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config_hash = r.u64()?;
        let epoch = r.u32()?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let at = r.offset();
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error_at(at, "parameter name is not UTF-8"))?
                .to_string();
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(r.error_here(format!("bad trainable flag {other}"))),
            };
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(r.error_here(format!("rank {rank} exceeds {MAX_RANK}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n.min(bytes.len() / 8));
            for _ in 0..n {
                data.push(r.f64()?);
            }
            let value = Tensor::new(shape, data).map_err(|e| r.error_at(at, e.to_string()))?;
            params.insert(name, value, trainable);
        }
        if !r.is_at_end() {
            return Err(r.error_here("trailing bytes after last entry"));
        }
        Ok(Self {
            config_hash,
            epoch,
            params,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("gm.head.b", Tensor::vector(vec![0.5, -1.0]).unwrap(), false);
        params.insert(
            "lm.in.w",
            Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, f64::MIN_POSITIVE, -0.0]).unwrap(),
            true,
        );
        params.insert("s", Tensor::scalar(3.25), true);
        Checkpoint {
            config_hash: 0xDEAD_BEEF_0123_4567,
            epoch: 12,
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        let err = Checkpoint::from_bytes(cut).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
    }
}
