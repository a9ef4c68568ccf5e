//! Shared training machinery: Adam, step-decay schedule, and the `SDNW`
//! checkpoint container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiply the learning rate by `decay` every `decay_every` steps.
    pub decay: f64,
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.98,
            decay_every: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        let periods = if self.cfg.decay_every > 0 {
            self.t / self.cfg.decay_every
        } else {
            0
        };
        self.cfg.lr * self.cfg.decay.powi(periods as i32)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        let lr = self.learning_rate();
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.cfg.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainReport {
    /// Mean training loss per epoch (or per logging interval).
    pub loss_trace: Vec<f64>,
    pub initial_validation: f64,
    pub final_validation: f64,
    pub param_checksum: String,
}

pub fn param_checksum(params: &[f64]) -> String {
    let bytes: Vec<u8> = params.iter().flat_map(|p| (*p as f32).to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// Rounds parameters to the `f32` precision they are checkpointed at, so a
/// network trained in-process and one reloaded from disk are identical.
pub fn round_to_f32(params: &mut [f64]) {
    for p in params {
        *p = *p as f32 as f64;
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDNW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum NetKind {
    Decomposer = 1,
    Denoiser = 2,
}

/// Raw checkpoint contents: architecture descriptor, `f64` constants, `f32`
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: NetKind,
    pub arch: Vec<u32>,
    pub constants: Vec<f64>,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.kind as u32).to_le_bytes());
        b.extend_from_slice(&(self.arch.len() as u32).to_le_bytes());
        for a in &self.arch {
            b.extend_from_slice(&a.to_le_bytes());
        }
        b.extend_from_slice(&(self.constants.len() as u32).to_le_bytes());
        for c in &self.constants {
            b.extend_from_slice(&c.to_le_bytes());
        }
        b.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            b.extend_from_slice(&p.to_le_bytes());
        }
        b
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, origin };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let kind = match r.u32()? {
            1 => NetKind::Decomposer,
            2 => NetKind::Denoiser,
            k => return Err(Error::format(origin, format!("unknown network kind {k}"))),
        };
        let n_arch = r.u32()? as usize;
        let arch = (0..n_arch).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n_const = r.u32()? as usize;
        let constants = (0..n_const).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let n_params = r.u64()? as usize;
        if r.remaining() != n_params * 4 {
            return Err(Error::format(origin, "parameter payload length mismatch"));
        }
        let params = (0..n_params).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            kind,
            arch,
            constants,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::decode(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}
