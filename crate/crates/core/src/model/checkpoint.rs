//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "LMKCKPT\0"
//! version      u32       FORMAT_VERSION
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON: {"config": .., "meta": ..}
//! count        u32       number of tensors
//! per tensor:
//!   name_len   u32, name (UTF-8)
//!   rank       u32, dims u64 x rank
//!   values     f32 x prod(dims)
//! ```
//!
//! The file ends exactly after the last tensor.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Slot;
use super::network::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::train::Variant;

pub const MAGIC: &[u8; 8] = b"LMKCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

const MAX_RANK: usize = 8;

/// Training provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub iteration: usize,
    pub validation_metric: Option<f64>,
    pub seed: u64,
    pub variant: Option<Variant>,
    /// Landmark names in output-channel order.
    #[serde(default)]
    pub landmark_names: Vec<String>,
    /// Training crop size.
    #[serde(default)]
    pub crop_extents: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: NetworkConfig,
    meta: TrainingMeta,
}

/// A named tensor: path, shape, values.
pub type NamedTensor = (String, Vec<usize>, Vec<f32>);

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub meta: TrainingMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, meta: TrainingMeta) -> Self {
        let tensors = net
            .tensors()
            .into_iter()
            .map(|(name, shape, values)| (name, shape, values.to_vec()))
            .collect();
        Self {
            config: net.config().clone(),
            meta,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
        })?;
        let payload: usize = self
            .tensors
            .iter()
            .map(|(n, s, v)| 8 + n.len() + 8 * s.len() + 4 * v.len())
            .sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, values) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parse a checkpoint. Never panics on malformed input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Corrupt("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(Error::Corrupt(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?)
                    .map_err(|_| Error::Corrupt("dimension overflow".into()))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Corrupt("tensor size overflow".into()))?;
                shape.push(d);
            }
            let nbytes = numel
                .checked_mul(4)
                .ok_or_else(|| Error::Corrupt("tensor size overflow".into()))?;
            let raw = r.take(nbytes)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, shape, values));
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    /// Rebuild the network, checking that every tensor matches the config.
    pub fn into_network(self) -> Result<Network<f32>> {
        let mut net = Network::<f32>::build(self.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut stored: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
        for (name, shape, values) in self.tensors {
            if stored.insert(name.clone(), (shape, values)).is_some() {
                return Err(Error::ShapeMismatch(format!("duplicate tensor {name}")));
            }
        }
        let mut failure: Option<Error> = None;
        net.tensors_mut(&mut |path, slot| {
            if failure.is_some() {
                return;
            }
            let (shape, dst) = match slot {
                Slot::Param(p) => (p.shape.clone(), &mut p.value),
                Slot::Buffer(shape, data) => (shape.to_vec(), data),
            };
            match stored.remove(path) {
                Some((s, v)) if s == shape => *dst = v,
                Some((s, _)) => {
                    failure = Some(Error::ShapeMismatch(format!(
                        "tensor {path}: stored shape {s:?}, config expects {shape:?}"
                    )))
                }
                None => failure = Some(Error::ShapeMismatch(format!("missing tensor {path}"))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::ShapeMismatch(format!("unexpected tensor {extra}")));
        }
        Ok(net)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Corrupt(format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn save(net: &Network<f32>, meta: TrainingMeta, path: &Path) -> Result<()> {
    let bytes = Checkpoint::from_network(net, meta).to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Network<f32>, TrainingMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let meta = ckpt.meta.clone();
    Ok((ckpt.into_network()?, meta))
}
