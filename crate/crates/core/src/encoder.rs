//! Frozen multi-level feature extraction.
//!
//! The toy encoder is three convolution stages with fixed random weights:
//! a `stride×stride` patch embedding, a residual 3×3 stage, and a linear 3×3
//! neck. The first two stage outputs are the mid-level taps, the neck output
//! is the high-level map. All three share one spatial resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::mask::Mask;
use crate::tensor::{kernels, Scalar, Tensor};
use crate::util;

/// An image with an optional ground-truth mask.
#[derive(Clone, Debug)]
pub struct ImageSample {
    /// `3×H×W`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub mask: Option<Mask>,
    pub class_id: usize,
    pub domain_id: usize,
}

impl ImageSample {
    pub fn dims(&self) -> (usize, usize) {
        (self.pixels.shape()[1], self.pixels.shape()[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Toy,
    Imported,
}

/// Features tapped at three depths; `f1`, `f2` mid-level, `f3` high-level.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLevelFeatures<T> {
    pub levels: [Tensor<T>; 3],
    pub source: FeatureSource,
}

impl<T: Scalar> MultiLevelFeatures<T> {
    pub fn new(levels: [Tensor<T>; 3], source: FeatureSource) -> Result<Self> {
        let spatial = |t: &Tensor<T>| -> Result<(usize, usize)> {
            match *t.shape() {
                [_, h, w] => Ok((h, w)),
                ref s => dim_err(format!("feature level must be c×h×w, got {s:?}")),
            }
        };
        let base = spatial(&levels[2])?;
        for l in &levels[..2] {
            if spatial(l)? != base {
                return dim_err(format!(
                    "mid-level map {:?} does not match high-level spatial size {:?}",
                    l.shape(),
                    base
                ));
            }
        }
        Ok(Self { levels, source })
    }

    pub fn f1(&self) -> &Tensor<T> {
        &self.levels[0]
    }

    pub fn f2(&self) -> &Tensor<T> {
        &self.levels[1]
    }

    pub fn f3(&self) -> &Tensor<T> {
        &self.levels[2]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.levels[2].shape();
        (s[1], s[2])
    }

    pub fn channels(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.levels[i].shape()[0])
    }

    pub fn cast<U: Scalar>(&self) -> MultiLevelFeatures<U> {
        MultiLevelFeatures { levels: self.levels.clone().map(|t| t.cast()), source: self.source }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// `desk` or `paper`; informational, the explicit fields below are authoritative.
    pub preset: String,
    pub image_size: usize,
    pub stride: usize,
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    /// Name the frozen weights are derived from.
    pub seed_name: String,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            image_size: 64,
            stride: 4,
            c1: 48,
            c2: 48,
            c3: 32,
            seed_name: "toy-encoder-v1".into(),
        }
    }

    /// Channel layout of the foundation encoder taps (imported features).
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            image_size: 1024,
            stride: 16,
            c1: 768,
            c2: 768,
            c3: 256,
            seed_name: "toy-encoder-v1".into(),
        }
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / self.stride
    }
}

/// Conv weights `c_out × c_in × k × k` with bias.
#[derive(Clone, Debug)]
struct ConvStage {
    w: Vec<f32>,
    b: Vec<f32>,
    cout: usize,
    cin: usize,
    k: usize,
}

impl ConvStage {
    fn random(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> Self {
        let fan_in = (cin * k * k) as f64;
        let d = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = (0..cout * cin * k * k).map(|_| d.sample(rng) as f32).collect();
        let bd = Normal::new(0.0, 0.05).expect("positive std");
        let b = (0..cout).map(|_| bd.sample(rng) as f32).collect();
        Self { w, b, cout, cin, k }
    }

    /// Convolution via im2col; `pad` zero padding, square stride.
    fn apply(&self, x: &[f32], h: usize, w: usize, stride: usize, pad: usize) -> (Vec<f32>, usize, usize) {
        let k = self.k;
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let rows = self.cin * k * k;
        let n = oh * ow;
        let mut cols = vec![0.0f32; rows * n];
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[r * n + oy * ow + ox] = x[ci * h * w + iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
        let mut out = kernels::matmul(&self.w, &cols, self.cout, rows, n);
        for (row, &b) in out.chunks_mut(n).zip(&self.b) {
            row.iter_mut().for_each(|v| *v += b);
        }
        (out, oh, ow)
    }

    fn bytes(&self) -> impl Iterator<Item = u8> + '_ {
        self.w.iter().chain(&self.b).flat_map(|v| v.to_le_bytes())
    }
}

/// Read-only encoder with fixed random weights.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    cfg: EncoderConfig,
    patch: ConvStage,
    mid: ConvStage,
    neck: ConvStage,
}

impl FrozenEncoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(util::seed_from_name(&cfg.seed_name));
        let patch = ConvStage::random(&mut rng, 3, cfg.c1, cfg.stride);
        let mid = ConvStage::random(&mut rng, cfg.c1, cfg.c2, 3);
        let neck = ConvStage::random(&mut rng, cfg.c2, cfg.c3, 3);
        Self { cfg: cfg.clone(), patch, mid, neck }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// SHA-256 over all weights, for frozen-ness audits.
    pub fn checksum(&self) -> String {
        let bytes: Vec<u8> = self.patch.bytes().chain(self.mid.bytes()).chain(self.neck.bytes()).collect();
        util::sha256_hex(&bytes)
    }

    pub fn extract(&self, img: &ImageSample) -> Result<MultiLevelFeatures<f32>> {
        let (h, w) = match *img.pixels.shape() {
            [3, h, w] => (h, w),
            ref s => return dim_err(format!("image must be 3×H×W, got {s:?}")),
        };
        let s = self.cfg.stride;
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return dim_err(format!("image {h}x{w} not divisible by encoder stride {s}"));
        }
        let x: Vec<f32> = img.pixels.data().iter().map(|&v| v - 0.5).collect();
        let (mut f1, fh, fw) = self.patch.apply(&x, h, w, s, 0);
        relu(&mut f1);
        let (mut f2, _, _) = self.mid.apply(&f1, fh, fw, 1, 1);
        if self.cfg.c1 == self.cfg.c2 {
            f2.iter_mut().zip(&f1).for_each(|(a, &b)| *a += b);
        }
        relu(&mut f2);
        let (f3, _, _) = self.neck.apply(&f2, fh, fw, 1, 1);
        MultiLevelFeatures::new(
            [
                Tensor::new(&[self.cfg.c1, fh, fw], f1)?,
                Tensor::new(&[self.cfg.c2, fh, fw], f2)?,
                Tensor::new(&[self.cfg.c3, fh, fw], f3)?,
            ],
            FeatureSource::Toy,
        )
    }
}

fn relu(v: &mut [f32]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}
