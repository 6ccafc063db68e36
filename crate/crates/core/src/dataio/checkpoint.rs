//! Model checkpoints.
//!
//! Layout (little-endian): `"RDCK"`, u32 version, u32 header length, TOML
//! header, u32 tensor count, then per tensor: u32 name length, UTF-8 name,
//! u8 dtype (0 = f32, 1 = f64), u32 rank, u64 per dimension, values.
//! Parameters are f32; Adam moments, when present, are f64 tensors named
//! `adam.m.<param>` and `adam.v.<param>` so a resumed run is bit-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, ParamStore, Tensor};
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleShape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::unet::UNetConfig;

pub const MAGIC: &[u8; 4] = b"RDCK";
pub const VERSION: u32 = 1;

const FIRST: &str = "adam.m.";
const SECOND: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleHeader {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub shape: ScheduleShape,
}

impl ScheduleHeader {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.shape)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub seed: u64,
    /// Side length of the square training images.
    pub image_size: usize,
    pub epochs_done: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub adam_step: u64,
    pub schedule: ScheduleHeader,
    pub model: UNetConfig,
}

/// First and second Adam moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub first: ParamStore<f64>,
    pub second: ParamStore<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: ParamStore<f32>,
    pub moments: Option<AdamMoments>,
}

fn ck_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return ck_err(format!("truncated while reading {what} at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn put_head(out: &mut Vec<u8>, name: &str, dtype: u8, shape: &[usize]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn moment_store(names: &[String], shapes: &ParamStore<f32>, moments: &[Vec<f64>]) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::new();
    for ((name, m), (_, t)) in names.iter().zip(moments).zip(shapes.iter()) {
        store.insert(name.clone(), Tensor { shape: t.shape.clone(), data: m.clone() })?;
    }
    Ok(store)
}

impl Checkpoint {
    /// Snapshot of training state; parameters are stored as f32.
    pub fn capture<T: Scalar>(header: CheckpointHeader, params: &ParamStore<T>, adam: Option<&AdamState>) -> Result<Self> {
        let tensors = params.cast::<f32>();
        let moments = match adam {
            Some(a) => {
                let names = tensors.names().to_vec();
                Some(AdamMoments {
                    first: moment_store(&names, &tensors, &a.first)?,
                    second: moment_store(&names, &tensors, &a.second)?,
                })
            }
            None => None,
        };
        Ok(Self { header: CheckpointHeader { adam_step: adam.map_or(0, |a| a.step), ..header }, tensors, moments })
    }

    /// Optimizer state aligned with the parameter order, when stored.
    pub fn adam_state(&self) -> Result<Option<AdamState>> {
        let Some(m) = &self.moments else { return Ok(None) };
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (name, t) in self.tensors.iter() {
            let a = m.first.get(name).ok_or_else(|| Error::Checkpoint(format!("missing first moment for {name}")))?;
            let b = m.second.get(name).ok_or_else(|| Error::Checkpoint(format!("missing second moment for {name}")))?;
            if a.shape != t.shape || b.shape != t.shape {
                return ck_err(format!("moment shape mismatch for {name}"));
            }
            first.push(a.data.clone());
            second.push(b.data.clone());
        }
        if m.first.len() != self.tensors.len() || m.second.len() != self.tensors.len() {
            return ck_err("moments name parameters that are not stored");
        }
        Ok(Some(AdamState { config: self.header.adam, step: self.header.adam_step, first, second }))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let extra = self.moments.as_ref().map_or(0, |m| m.first.len() + m.second.len());
        out.extend_from_slice(&((self.tensors.len() + extra) as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            if name.starts_with("adam.") {
                return ck_err(format!("parameter name {name} collides with optimizer state"));
            }
            put_head(&mut out, name, 0, &t.shape);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(m) = &self.moments {
            for (prefix, store) in [(FIRST, &m.first), (SECOND, &m.second)] {
                for (name, t) in store.iter() {
                    put_head(&mut out, &format!("{prefix}{name}"), 1, &t.shape);
                    for v in &t.data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return ck_err("not a checkpoint (bad magic)");
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return ck_err(format!("unsupported checkpoint version {version}"));
        }
        let hlen = r.u32("header length")? as usize;
        let htext = std::str::from_utf8(r.take(hlen, "header")?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let header: CheckpointHeader =
            toml::from_str(htext).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = ParamStore::new();
        let mut first = ParamStore::new();
        let mut second = ParamStore::new();
        let dup = |e: Error| Error::Checkpoint(e.to_string());
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8("dtype")?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
            let width = match dtype {
                0 => 4,
                1 => 8,
                _ => return ck_err(format!("unknown dtype {dtype} for tensor {name}")),
            };
            let bytes = n.checked_mul(width).ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
            let raw = r.take(bytes, &name)?;
            match (dtype, name.strip_prefix(FIRST), name.strip_prefix(SECOND)) {
                (0, None, None) => {
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    tensors.insert(name, Tensor { shape, data }).map_err(dup)?;
                }
                (1, Some(p), None) | (1, None, Some(p)) => {
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    let store = if name.starts_with(FIRST) { &mut first } else { &mut second };
                    store.insert(p.to_string(), Tensor { shape, data }).map_err(dup)?;
                }
                _ => return ck_err(format!("tensor {name} has unexpected dtype {dtype}")),
            }
        }
        if r.pos != bytes.len() {
            return ck_err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let moments = if first.is_empty() && second.is_empty() { None } else { Some(AdamMoments { first, second }) };
        let ck = Self { header, tensors, moments };
        ck.adam_state()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
