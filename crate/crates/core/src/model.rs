//! End-to-end wiring: frozen features → DPAT → prompt generator → decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dpat::{self, Anchors, PrototypeMatrix, PseudoMode, PseudoSource, TransformSet};
use crate::encoder::{EncoderConfig, MultiLevelFeatures};
use crate::episodes::{Episode, Segmenter};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::maskdec::{DecoderConfig, MaskDecoder};
use crate::mpg::{Mpg, MpgConfig, MpgInputs};
use crate::nn::Ctx;
use crate::tensor::{ParamStore, PriorMaskFlags, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpatConfig {
    pub enabled: bool,
    pub pseudo: PseudoMode,
}

impl Default for DpatConfig {
    fn default() -> Self {
        Self { enabled: true, pseudo: PseudoMode::Ccs }
    }
}

/// The sections that determine parameter shapes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub encoder: EncoderConfig,
    pub dpat: DpatConfig,
    pub mpg: MpgConfig,
    pub decoder: DecoderConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// DPAT, both prompt paths and the decoder.
    Full,
    /// Prompt generator and decoder on untransformed features.
    NoDpat,
    /// Dense path only, predicting the mask directly.
    Baseline,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "baseline+mpg+dpat",
            Self::NoDpat => "baseline+mpg",
            Self::Baseline => "baseline",
        }
    }
}

impl ArchConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    /// Foundation-scale channels (imported features).
    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig::paper(),
            dpat: DpatConfig::default(),
            mpg: MpgConfig::paper(),
            decoder: DecoderConfig::default(),
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.dpat.enabled = v == Variant::Full;
        self.mpg.sparse = v != Variant::Baseline;
        self.decoder.enabled = v != Variant::Baseline;
        self
    }

    pub fn variant(&self) -> Variant {
        match (self.dpat.enabled, self.decoder.enabled) {
            (_, false) => Variant::Baseline,
            (true, true) => Variant::Full,
            (false, true) => Variant::NoDpat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.stride == 0 || !e.image_size.is_multiple_of(e.stride) {
            return Err(Error::Config(format!("image_size {} not divisible by stride {}", e.image_size, e.stride)));
        }
        if !self.decoder.enabled && self.mpg.sparse {
            return Err(Error::Config("mpg.sparse requires decoder.enabled".into()));
        }
        if self.dpat.enabled && e.c1 != e.c2 {
            return Err(Error::Config("dpat needs c1 == c2 (shared mid anchor)".into()));
        }
        if !self.mpg.c_o.is_multiple_of(4) {
            return Err(Error::Config(format!("mpg.c_o = {} must be a multiple of 4", self.mpg.c_o)));
        }
        if self.mpg.k == 0 || self.mpg.c_r == 0 || self.mpg.pyramid.is_empty() {
            return Err(Error::Config("mpg.k, mpg.c_r and mpg.pyramid must be nonzero".into()));
        }
        Ok(())
    }
}

/// Inputs of one forward pass.
#[derive(Clone, Debug)]
pub struct EpisodeInput<'a, T> {
    pub support: Vec<&'a MultiLevelFeatures<T>>,
    /// Support masks at feature resolution.
    pub masks: Vec<Mask>,
    pub query: &'a MultiLevelFeatures<T>,
}

impl<'a> EpisodeInput<'a, f32> {
    pub fn from_episode(ep: &Episode<'a>) -> Self {
        Self {
            support: ep.support.iter().map(|s| &s.features).collect(),
            masks: ep.support.iter().map(|s| s.feature_mask.clone()).collect(),
            query: &ep.query.features,
        }
    }
}

#[derive(Debug)]
pub struct ForwardOutput<T> {
    /// `1×H×W` query logits.
    pub logits: Var,
    pub transforms: Option<TransformSet<T>>,
    pub prior_flags: PriorMaskFlags,
    /// Pseudo prototypes were empty at some level.
    pub pseudo_fallback: bool,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub arch: ArchConfig,
    pub params: ParamStore<T>,
    pub anchors: Option<Anchors>,
    pub mpg: Mpg,
    pub decoder: Option<MaskDecoder>,
}

impl<T: Scalar> Model<T> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let e = &arch.encoder;
        let anchors = if arch.dpat.enabled {
            Some(Anchors::new(&mut params, &mut rng, [e.c1, e.c2, e.c3])?)
        } else {
            None
        };
        let dense_channels = if arch.decoder.enabled { arch.mpg.c_o } else { 1 };
        let mpg = Mpg::new(&mut params, &mut rng, &arch.mpg, e.c1 + e.c2, dense_channels)?;
        let decoder = if arch.decoder.enabled {
            Some(MaskDecoder::new(&mut params, &mut rng, &arch.decoder, e.c3, arch.mpg.c_o)?)
        } else {
            None
        };
        Ok(Self { arch: arch.clone(), params, anchors, mpg, decoder })
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant()
    }

    /// Trainable parameter count (the encoder holds none).
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            params.insert(&p.name, p.value.cast());
        }
        Model {
            arch: self.arch.clone(),
            params,
            anchors: self.anchors.clone(),
            mpg: self.mpg.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Records a full forward pass on `ctx` (whose parameters must be `self.params`).
    pub fn forward(&self, ctx: &mut Ctx<T>, inp: &EpisodeInput<T>) -> Result<ForwardOutput<T>> {
        let pseudo = match (self.anchors.is_some(), self.arch.dpat.pseudo) {
            (false, _) | (true, PseudoMode::None) => PseudoSource::None,
            (true, PseudoMode::Ccs) => PseudoSource::Ccs,
            (true, PseudoMode::PmMap) => PseudoSource::Given(Box::new(self.pm_map_pseudo(ctx.params(), inp)?)),
        };
        self.forward_with(ctx, inp, &pseudo)
    }

    /// Pseudo prototypes pooled over a coarse prediction made with support
    /// prototypes only. The coarse pass is not differentiated.
    fn pm_map_pseudo(&self, params: &ParamStore<T>, inp: &EpisodeInput<T>) -> Result<[PrototypeMatrix<T>; 3]> {
        let mut coarse = Ctx::new(params);
        let out = self.forward_with(&mut coarse, inp, &PseudoSource::None)?;
        let logits = coarse.value(out.logits);
        let lv = |l: usize| dpat::pm_map_prototypes(logits, &inp.query.levels[l]);
        Ok([lv(0)?, lv(1)?, lv(2)?])
    }

    pub fn forward_with(&self, ctx: &mut Ctx<T>, inp: &EpisodeInput<T>, pseudo: &PseudoSource<T>) -> Result<ForwardOutput<T>> {
        let (support, query, transforms, pseudo_fallback) = match &self.anchors {
            Some(anchors) => {
                let t = dpat::transform(ctx, anchors, &inp.support, &inp.masks, inp.query, pseudo)?;
                let fallback = !matches!(pseudo, PseudoSource::None)
                    && t.set.levels.iter().any(|l| l.prototypes.fg_empty || l.prototypes.bg_empty);
                (t.support, t.query, Some(t.set), fallback)
            }
            None => {
                let mut bind = |f: &MultiLevelFeatures<T>| -> Result<[Var; 3]> {
                    Ok([ctx.constant(f.levels[0].clone())?, ctx.constant(f.levels[1].clone())?, ctx.constant(f.levels[2].clone())?])
                };
                let s = inp.support.iter().map(|f| bind(f)).collect::<Result<Vec<_>>>()?;
                let q = bind(inp.query)?;
                (s, q, None, false)
            }
        };
        let prompts = self.mpg.generate(ctx, &MpgInputs { support: &support, query, masks: &inp.masks })?;
        let logits = match &self.decoder {
            Some(dec) => dec.decode(ctx, prompts.sparse, prompts.dense, query[2])?,
            None => {
                let [_, h, w] = *ctx.value(prompts.dense).shape() else {
                    unreachable!("dense path output is c×h×w")
                };
                ctx.tape.bilinear_resize(prompts.dense, 4 * h, 4 * w)?
            }
        };
        Ok(ForwardOutput { logits, transforms, prior_flags: prompts.prior_flags, pseudo_fallback })
    }

    /// Logits as a value, without keeping the tape.
    pub fn logits(&self, inp: &EpisodeInput<T>) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(&self.params);
        let out = self.forward(&mut ctx, inp)?;
        Ok(ctx.value(out.logits).clone())
    }
}

/// Bilinear resize of `1×h×w` logits to `th×tw`, then `sigmoid > 0.5`.
pub fn logits_to_mask<T: Scalar>(logits: &Tensor<T>, th: usize, tw: usize) -> Result<Mask> {
    let [1, h, w] = *logits.shape() else {
        return crate::error::dim_err(format!("logits must be 1×h×w, got {:?}", logits.shape()));
    };
    if (h, w) == (th, tw) {
        return Mask::from_positive(logits);
    }
    let data = crate::tensor::kernels::bilinear_resize(logits.data(), 1, h, w, th, tw);
    Mask::from_positive(&Tensor::new(&[1, th, tw], data)?)
}

impl<T: Scalar> Segmenter for Model<T> {
    fn predict(&self, ep: &Episode) -> Result<Mask> {
        let feats: Vec<MultiLevelFeatures<T>> = ep.support.iter().map(|s| s.features.cast()).collect();
        let query = ep.query.features.cast();
        let inp = EpisodeInput {
            support: feats.iter().collect(),
            masks: ep.support.iter().map(|s| s.feature_mask.clone()).collect(),
            query: &query,
        };
        let (h, w) = ep.query.mask().dims();
        logits_to_mask(&self.logits(&inp)?, h, w)
    }
}
