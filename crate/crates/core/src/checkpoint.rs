//! `.apck` v1 checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "APCK" | version u32
//! arch_hash str | full_hash str | config str     (str = u32 length + UTF-8)
//! seed u64 | step u64 | lr f64 | beta1 f64 | beta2 f64 | eps f64
//! param_count u32
//! per parameter: name str | ndim u32 | dims u32… | adam_step u64 | value f32… | m f32… | v f32…
//! ```

use std::path::Path;

use crate::config::{arch_hash, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{AdamConfig, Tensor};
use crate::trainer::Trainer;
use crate::util;

pub const MAGIC: &[u8; 4] = b"APCK";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "apck";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub step: u64,
    pub value: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch_hash: String,
    pub full_hash: String,
    /// The run configuration, as TOML.
    pub config: String,
    pub seed: u64,
    pub step: u64,
    pub adam: AdamConfig,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, cfg: &RunConfig, step: u64) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                step: p.step,
                value: p.value.data().to_vec(),
                m: p.m.clone(),
                v: p.v.clone(),
            })
            .collect();
        Self {
            arch_hash: arch_hash(&model.arch),
            full_hash: cfg.full_hash(),
            config: cfg.to_toml(),
            seed: cfg.train.seed,
            step,
            adam: AdamConfig::with_lr(cfg.train.lr),
            params,
        }
    }

    pub fn from_trainer(tr: &Trainer, cfg: &RunConfig) -> Self {
        Self::from_model(&tr.model, cfg, tr.step)
    }

    /// The embedded configuration, checked against the stored hashes.
    pub fn run_config(&self) -> Result<RunConfig> {
        let cfg = RunConfig::from_toml(&self.config)?;
        if cfg.arch_hash() != self.arch_hash {
            return Err(Error::HashMismatch(format!(
                "stored architecture hash {} does not match the embedded config ({})",
                self.arch_hash,
                cfg.arch_hash()
            )));
        }
        Ok(cfg)
    }

    /// Rebuilds the model. `expected` is the architecture the caller intends
    /// to use; a different hash is refused.
    pub fn model(&self, expected: &RunConfig) -> Result<Model<f32>> {
        let stored = self.run_config()?;
        if expected.arch_hash() != self.arch_hash {
            return Err(Error::HashMismatch(format!(
                "checkpoint architecture {} differs from config {}",
                short(&self.arch_hash),
                short(&expected.arch_hash())
            )));
        }
        let mut model = Model::<f32>::new(&stored.arch(), stored.train.seed)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, architecture needs {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for rec in &self.params {
            let id = model
                .params
                .id(&rec.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {}", rec.name)))?;
            let p = model.params.get_mut(id);
            if p.value.shape() != rec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    rec.name,
                    rec.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(&rec.shape, rec.value.clone())?;
            p.m = rec.m.clone();
            p.v = rec.v.clone();
            p.step = rec.step;
        }
        Ok(model)
    }

    /// Restores a trainer that continues where this checkpoint stopped.
    /// Training keys (steps, logging) come from `cfg`.
    pub fn trainer(&self, cfg: &RunConfig) -> Result<Trainer> {
        let model = self.model(cfg)?;
        let mut train = cfg.train.clone();
        train.seed = self.seed;
        let mut tr = Trainer::new(model, &train, cfg.data.shots)?;
        tr.step = self.step;
        Ok(tr)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for s in [&self.arch_hash, &self.full_hash, &self.config] {
            put_str(&mut out, s);
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for x in [self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&p.step.to_le_bytes());
            for buf in [&p.value, &p.m, &p.v] {
                for x in buf.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let arch_hash = r.str()?;
        let full_hash = r.str()?;
        let config = r.str()?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let adam = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Format(format!("parameter {name} has {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let pstep = r.u64()?;
            let value = r.f32s(n)?;
            let m = r.f32s(n)?;
            let v = r.f32s(n)?;
            params.push(ParamRecord { name, shape, step: pstep, value, m, v });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { arch_hash, full_hash, config, seed, step, adam, params })
    }

    /// SHA-256 of the encoded file.
    pub fn hash(&self) -> String {
        util::sha256_hex(&self.encode())
    }

    /// Writes the checkpoint and returns its hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.encode();
        std::fs::write(path, &bytes)?;
        Ok(util::sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
