//! Binary checkpoints.
//!
//! Layout (little-endian): magic `NSF1`, version `u32`, config blob length
//! `u32` + TOML bytes, tensor count `u32`, then per tensor: name length
//! `u32`, name bytes, rank `u32`, dims `u32` each, `f32` values. Tensors are
//! stored as `f32`; a saved-then-loaded model holds the f32-rounded values.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{NsfError, Result};
use crate::filter::{ModelDims, ModelParams};

pub const MAGIC: [u8; 4] = *b"NSF1";
pub const FORMAT_VERSION: u32 = 1;

/// Model dimensions implied by a training config.
pub fn model_dims(cfg: &TrainConfig) -> ModelDims {
    ModelDims {
        cond_inputs: 1 + cfg.features.spectral_dims,
        merge_inputs: cfg.switches.excitation_mode.merge_inputs(cfg.source.num_harmonics),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    /// Optimizer steps taken.
    pub step: u64,
    /// Seed of the run's RNG streams; all per-step randomness derives from it.
    pub rng_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    step: u64,
    rng_seed: u64,
    config: TrainConfig,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(NsfError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| NsfError::InvalidArgument(format!("{v} does not fit the u32 wire format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: ModelParams, step: u64, rng_seed: u64) -> Result<Self> {
        let ckpt = Self {
            config,
            params,
            step,
            rng_seed,
        };
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    /// Verifies that the parameters have the shapes the config implies.
    pub fn check_shapes(&self) -> Result<()> {
        let fresh = ModelParams::init(&self.config.layers, model_dims(&self.config), 0)?;
        let want = fresh.named();
        let got = self.params.named();
        if want.len() != got.len() {
            return Err(NsfError::CheckpointMismatch(format!(
                "config implies {} tensors, model has {}",
                want.len(),
                got.len()
            )));
        }
        for ((wn, wp), (gn, gp)) in want.iter().zip(&got) {
            if wn != gn || wp.shape != gp.shape {
                return Err(NsfError::CheckpointMismatch(format!(
                    "expected {wn} {:?}, found {gn} {:?}",
                    wp.shape, gp.shape
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            step: self.step,
            rng_seed: self.rng_seed,
            config: self.config.clone(),
        };
        let blob = toml::to_string(&meta).map_err(|e| NsfError::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        push_u32(&mut out, blob.len())?;
        out.extend_from_slice(blob.as_bytes());
        let tensors = self.params.named();
        push_u32(&mut out, tensors.len())?;
        for (name, p) in tensors {
            push_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, p.shape.len())?;
            for &d in &p.shape {
                push_u32(&mut out, d)?;
            }
            for &v in &p.value {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(NsfError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(NsfError::UnsupportedVersion(version));
        }
        let blob_len = r.u32("config length")? as usize;
        let blob = r.take(blob_len, "config")?;
        let text = std::str::from_utf8(blob).map_err(|e| NsfError::Config(format!("config blob: {e}")))?;
        let meta: Meta = toml::from_str(text).map_err(|e| NsfError::Config(format!("config blob: {e}")))?;
        meta.config.validate()?;

        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|e| NsfError::CheckpointMismatch(format!("tensor name: {e}")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(NsfError::CheckpointMismatch(format!("duplicate tensor {name}")));
            }
            let rank = r.u32("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("tensor dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| NsfError::CheckpointMismatch(format!("tensor {name} is too large")))?;
            let data = r.take(n, "tensor data")?;
            let values: Vec<f64> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((name, shape, values));
        }
        if r.pos != bytes.len() {
            return Err(NsfError::CheckpointMismatch(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }

        let mut params = ModelParams::init(&meta.config.layers, model_dims(&meta.config), 0)?;
        let slots = params.named_mut();
        if slots.len() != tensors.len() {
            return Err(NsfError::CheckpointMismatch(format!(
                "config implies {} tensors, file has {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((slot_name, slot), (name, shape, values)) in slots.into_iter().zip(tensors) {
            if slot_name != name || slot.shape != shape {
                return Err(NsfError::CheckpointMismatch(format!(
                    "expected {slot_name} {:?}, found {name} {shape:?}",
                    slot.shape
                )));
            }
            slot.value = values;
        }
        Ok(Self {
            config: meta.config,
            params,
            step: meta.step,
            rng_seed: meta.rng_seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| NsfError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| NsfError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
