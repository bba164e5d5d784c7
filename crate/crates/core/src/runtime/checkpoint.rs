//! `EVCK` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "EVCK"
//! version      u16      1
//! stage        u8       0 backbone, 1 txe, 2 probe
//! config_hash  u64
//! config_len   u32
//! config       config_len bytes of UTF-8 config text
//! n_tensors    u32
//! tensors      n_tensors x (name_len u16, name, rank u8, dims u32 x rank, f32 payload)
//! checksum     u64      FNV-1a of every preceding byte
//! ```
//!
//! Magic and version are checked first so foreign or future files get a
//! precise error; anything else that fails to parse, including a
//! truncated file, is reported as corruption.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng::fnv1a64;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"EVCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Backbone,
    Txe,
    Probe,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Txe => "txe",
            Stage::Probe => "probe",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Stage::Backbone => 0,
            Stage::Txe => 1,
            Stage::Probe => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        [Stage::Backbone, Stage::Txe, Stage::Probe].into_iter().find(|s| s.tag() == t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config_hash: u64,
    /// Resolved configuration text of the producing run.
    pub config: String,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage.tag());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut seen = HashSet::new();
        for (name, t) in self.params.iter() {
            if !seen.insert(name) {
                return Err(Error::InvalidArgument(format!("duplicate tensor name {name:?}")));
            }
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name:?}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Corrupt(format!("{} bytes is too short for a checkpoint", bytes.len())));
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found });
        }
        if bytes.len() < 6 {
            return Err(Error::Corrupt("file ends inside the header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        if bytes.len() < 6 + 8 {
            return Err(Error::Corrupt("file ends inside the header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a64(body) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let mut r = Cursor { buf: body, pos: 6 };
        let tag = r.take(1)?[0];
        let stage = Stage::from_tag(tag).ok_or_else(|| Error::Corrupt(format!("unknown stage tag {tag}")))?;
        let config_hash = r.u64()?;
        let n = r.u32()? as usize;
        let config = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Corrupt("config text is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            if params.id_of(name).is_some() {
                return Err(Error::Corrupt(format!("duplicate tensor name {name:?}")));
            }
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.add(name, Tensor::new(shape, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            stage,
            config_hash,
            config,
            params,
        })
    }

    /// Errors with [`Error::StageMismatch`] unless the checkpoint has `stage`.
    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::StageMismatch {
                expected: stage.name().into(),
                found: self.stage.name().into(),
            });
        }
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!("unexpected end of data at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes through a temporary file and a rename so readers never see a
/// half-written checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.encode()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}

/// Loads and checks the stage; a missing file is [`Error::MissingCheckpoint`].
pub fn load_stage(path: impl AsRef<Path>, stage: Stage) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingCheckpoint {
            what: stage.name(),
            path: path.to_path_buf(),
        });
    }
    let ckpt = load_checkpoint(path)?;
    ckpt.expect_stage(stage)?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("a", Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap());
        params.add("b", Tensor::vector(vec![0.1f32, 0.2]));
        Checkpoint {
            stage: Stage::Txe,
            config_hash: 0xdead_beef,
            config: "run.seed = 3\n".into(),
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back.stage, c.stage);
        assert_eq!(back.config, c.config);
        for ((n1, t1), (n2, t2)) in c.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|x| x.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::VersionMismatch { found: 9, .. })));
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Corrupt(_))));
        for cut in [5, 13, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let c = Checkpoint::decode(&bytes).unwrap();
        assert!(matches!(c.expect_stage(Stage::Backbone), Err(Error::StageMismatch { .. })));
    }
}
