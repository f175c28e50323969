//! Binary checkpoints.
//!
//! Little-endian layout: magic `XCSC`, `u32` version, config text
//! (`u32` length + UTF-8), `u64` epoch, `u64` step, RNG state (`u64` seed,
//! `u64` stream, `u128` word position), `u32` tensor count, then per tensor
//! its name (`u32` length + UTF-8), `u32` rank, `u32` extents and `f64`
//! values, then the Adam step (`u64`) and both moment vectors per tensor,
//! and finally an FNV-1a 64 checksum of every preceding byte.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::harness::optim::Adam;
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"XCSC";
const VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Training config as `key = value` text.
    pub config: String,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    /// Parameters by name, in store order.
    pub params: Vec<(String, Tensor)>,
    pub adam_step: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl Checkpoint {
    pub fn capture(config: String, epoch: u64, step: u64, rng: RngState, ps: &ParamStore, adam: &Adam) -> Self {
        Checkpoint {
            config,
            epoch,
            step,
            rng,
            params: ps.iter().map(|(_, n, t)| (n.to_string(), t.detached())).collect(),
            adam_step: adam.step,
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let u32_ = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        let text = |out: &mut Vec<u8>, s: &str| {
            u32_(out, s.len());
            out.extend_from_slice(s.as_bytes());
        };
        let floats = |out: &mut Vec<u8>, xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        text(&mut out, &self.config);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        u32_(&mut out, self.params.len());
        for (name, t) in &self.params {
            text(&mut out, name);
            u32_(&mut out, t.rank());
            t.shape().iter().for_each(|&e| u32_(&mut out, e));
            floats(&mut out, t.data());
        }
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        for (m, v) in self.adam_m.iter().zip(&self.adam_v) {
            floats(&mut out, m);
            floats(&mut out, v);
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Parses a checkpoint image. A file that ends early is reported as
    /// truncated; a complete file whose bytes changed fails the checksum.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::CheckpointVersion(version));
        }
        let config = r.text("config")?;
        let epoch = r.u64("epoch")?;
        let step = r.u64("step")?;
        let rng = RngState {
            seed: r.u64("rng seed")?,
            stream: r.u64("rng stream")?,
            word_pos: u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes")),
        };
        let count = r.u32("tensor count")? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.text("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("tensor extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product::<usize>();
            let data = r.floats(n, &name)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::CheckpointTruncated(format!("tensor `{name}`: {e}")))?;
            params.push((name, t));
        }
        let adam_step = r.u64("optimizer step")?;
        let mut adam_m = Vec::with_capacity(params.len());
        let mut adam_v = Vec::with_capacity(params.len());
        for (name, t) in &params {
            adam_m.push(r.floats(t.numel(), name)?);
            adam_v.push(r.floats(t.numel(), name)?);
        }
        let body = r.pos;
        let stored = r.u64("checksum")?;
        if r.pos != bytes.len() {
            return Err(Error::CheckpointChecksum {
                stored,
                computed: checksum(&bytes[..body]),
            });
        }
        let computed = checksum(&bytes[..body]);
        if stored != computed {
            return Err(Error::CheckpointChecksum { stored, computed });
        }
        Ok(Checkpoint {
            config,
            epoch,
            step,
            rng,
            params,
            adam_step,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Copies stored tensors into `ps`. Names must match one to one and
    /// shapes exactly.
    pub fn restore_params(&self, ps: &mut ParamStore) -> Result<()> {
        for (name, t) in &self.params {
            let id = ps.id(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let expected = ps.get(id).shape().to_vec();
            if expected != t.shape() {
                return Err(Error::ParamDim {
                    name: name.clone(),
                    expected,
                    found: t.shape().to_vec(),
                });
            }
        }
        if let Some((_, missing, _)) = ps.iter().find(|(_, n, _)| !self.params.iter().any(|(m, _)| m == n)) {
            return Err(Error::MissingParam(missing.to_string()));
        }
        for (name, t) in &self.params {
            let id = ps.id(name).expect("checked above");
            *ps.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Restores optimizer moments into `adam`, which must match `ps` order.
    pub fn restore_optimizer(&self, ps: &ParamStore, adam: &mut Adam) -> Result<()> {
        for ((_, name, _), (stored, _)) in ps.iter().zip(&self.params) {
            if name != stored {
                return Err(Error::UnknownParam(stored.clone()));
            }
        }
        adam.step = self.adam_step;
        adam.m = self.adam_m.clone();
        adam.v = self.adam_v.clone();
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::CheckpointTruncated(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::CheckpointTruncated(format!("{what} is not UTF-8")))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.saturating_mul(8), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect())
    }
}
