//! Run configuration: one TOML file with `encoder`, `dpat`, `mpg`,
//! `decoder`, `data`, `train` and `eval` tables. Every key has a default and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::episodes::{DataConfig, EvalConfig};
use crate::error::{Error, Result};
use crate::maskdec::DecoderConfig;
use crate::model::{ArchConfig, DpatConfig, Variant};
use crate::mpg::MpgConfig;
use crate::trainer::TrainConfig;
use crate::util;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub dpat: DpatConfig,
    pub mpg: MpgConfig,
    pub decoder: DecoderConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    pub fn paper() -> Self {
        let a = ArchConfig::paper();
        Self { encoder: a.encoder, dpat: a.dpat, mpg: a.mpg, decoder: a.decoder, ..Self::default() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected desk or paper)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.eval.runs == 0 || self.eval.episodes == 0 {
            return Err(Error::Config("eval.runs and eval.episodes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            encoder: self.encoder.clone(),
            dpat: self.dpat.clone(),
            mpg: self.mpg.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn set_arch(&mut self, a: ArchConfig) {
        self.encoder = a.encoder;
        self.dpat = a.dpat;
        self.mpg = a.mpg;
        self.decoder = a.decoder;
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        let a = self.arch().with_variant(v);
        self.set_arch(a);
        self
    }

    /// Hash of the sections that fix parameter shapes and semantics; a
    /// checkpoint can only be loaded under a config with the same value.
    pub fn arch_hash(&self) -> String {
        arch_hash(&self.arch())
    }

    /// Hash of the whole configuration.
    pub fn full_hash(&self) -> String {
        util::sha256_hex(self.to_toml().as_bytes())
    }
}

pub fn arch_hash(a: &ArchConfig) -> String {
    util::sha256_hex(toml::to_string(a).expect("config serializes").as_bytes())
}
