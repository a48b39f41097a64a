//! Meta prompt generator: sparse and dense prompt embeddings from
//! transformed episode features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::mask::Mask;
use crate::nn::{Attention, Conv1x1, Ctx, LayerNorm, Linear, Mlp};
use crate::tensor::{Init, ParamId, ParamStore, PriorMaskFlags, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpgConfig {
    /// Reduction width.
    pub c_r: usize,
    /// Prompt embedding width.
    pub c_o: usize,
    /// Number of sparse embeddings.
    pub k: usize,
    /// Transformer decoder blocks in the sparse path.
    pub blocks: usize,
    /// Feed-forward width as a multiple of `c_r`.
    pub ffn_mult: usize,
    /// Pooled sizes of the enhancement pyramid; sizes above the feature
    /// resolution are clamped to it.
    pub pyramid: Vec<usize>,
    /// Whether sparse embeddings are produced at all.
    pub sparse: bool,
}

impl Default for MpgConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MpgConfig {
    pub fn desk() -> Self {
        Self { c_r: 16, c_o: 32, k: 4, blocks: 2, ffn_mult: 4, pyramid: vec![16, 8, 4, 2], sparse: true }
    }

    pub fn paper() -> Self {
        Self { c_r: 64, c_o: 256, k: 4, blocks: 2, ffn_mult: 4, pyramid: vec![60, 30, 15, 8], sparse: true }
    }
}

/// Sparse (`k×c_o`) and dense (`c_o×h×w`) prompt embeddings.
#[derive(Debug)]
pub struct PromptEmbeddings {
    /// Absent when the sparse path is disabled.
    pub sparse: Option<Var>,
    pub dense: Var,
    /// `1×h×w` prior mask.
    pub prior: Var,
    pub prior_flags: PriorMaskFlags,
    /// Reduced support prototype, `c_r`.
    pub prototype: Var,
}

/// Interleaved sine/cosine encoding of the flattened position index,
/// `n×d`: even columns `sin(pos/10000^(2i/d))`, odd columns the cosine.
pub fn sine_encoding<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            data.push(T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[n, d], data).expect("n×d")
}

/// Post-norm transformer decoder block: self-attention, cross-attention,
/// feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

impl DecoderBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, d: usize, ffn: usize) -> Self {
        Self {
            self_attn: Attention::new(store, rng, &format!("{name}.self"), d, d),
            norm1: LayerNorm::new(store, rng, &format!("{name}.ln1"), d),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross"), d, d),
            norm2: LayerNorm::new(store, rng, &format!("{name}.ln2"), d),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), d, ffn, d),
            norm3: LayerNorm::new(store, rng, &format!("{name}.ln3"), d),
        }
    }

    /// `tokens: k×d`, `memory: n×d`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, tokens: Var, memory: Var) -> Result<Var> {
        let a = self.self_attn.forward(ctx, tokens, tokens, tokens)?;
        let t = ctx.tape.add(tokens, a)?;
        let t = self.norm1.forward(ctx, t)?;
        let a = self.cross_attn.forward(ctx, t, memory, memory)?;
        let t = ctx.tape.add(t, a)?;
        let t = self.norm2.forward(ctx, t)?;
        let a = self.ffn.forward(ctx, t)?;
        let t = ctx.tape.add(t, a)?;
        self.norm3.forward(ctx, t)
    }
}

/// Pyramid pooling with per-scale convolutions, coarse-to-fine additive
/// merging and a fusing convolution.
#[derive(Clone, Debug)]
pub struct Fem {
    pub sizes: Vec<usize>,
    pub scale_convs: Vec<Conv1x1>,
    pub merge: Conv1x1,
}

impl Fem {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c: usize, sizes: &[usize]) -> Self {
        let scale_convs = (0..sizes.len())
            .map(|i| Conv1x1::new(store, rng, &format!("{name}.scale{i}"), c, c))
            .collect();
        let merge = Conv1x1::new(store, rng, &format!("{name}.merge"), c * sizes.len(), c);
        Self { sizes: sizes.to_vec(), scale_convs, merge }
    }

    /// `x: c×h×w` → `c×h×w`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let [_, h, w] = *ctx.value(x).shape() else {
            return dim_err("FEM input must be c×h×w");
        };
        // Finest scale first in `sizes`; merge from the coarsest.
        let mut order: Vec<usize> = (0..self.sizes.len()).collect();
        order.sort_by_key(|&i| self.sizes[i]);
        let mut merged: Option<Var> = None;
        let mut ups = vec![None; self.sizes.len()];
        for &i in &order {
            let (sh, sw) = (self.sizes[i].min(h), self.sizes[i].min(w));
            let pooled = ctx.tape.adaptive_avg_pool(x, sh, sw)?;
            let y = self.scale_convs[i].forward(ctx, pooled)?;
            let mut y = ctx.tape.relu(y)?;
            if let Some(prev) = merged {
                let up = ctx.tape.bilinear_resize(prev, sh, sw)?;
                y = ctx.tape.add(y, up)?;
            }
            merged = Some(y);
            ups[i] = Some(ctx.tape.bilinear_resize(y, h, w)?);
        }
        let ups: Vec<Var> = ups.into_iter().map(|u| u.expect("every scale visited")).collect();
        let cat = ctx.tape.concat_rows(&ups)?;
        let y = self.merge.forward(ctx, cat)?;
        ctx.tape.relu(y)
    }
}

/// Inputs of [`Mpg::generate`], all on the same tape.
pub struct MpgInputs<'a> {
    /// Per shot `[f̂₁, f̂₂, f̂₃]`.
    pub support: &'a [[Var; 3]],
    pub query: [Var; 3],
    /// Support masks at feature resolution.
    pub masks: &'a [Mask],
}

#[derive(Clone, Debug)]
pub struct SparsePath {
    pub augment: Linear,
    pub token_pos: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub lift: Mlp,
}

#[derive(Clone, Debug)]
pub struct Mpg {
    pub cfg: MpgConfig,
    pub reduce: Conv1x1,
    pub sparse: Option<SparsePath>,
    pub dense_in: Conv1x1,
    pub fem: Fem,
    pub dense_out: Conv1x1,
}

impl Mpg {
    /// `mid_channels = c₁ + c₂`. `dense_channels` is `c_o` normally, or 1 when
    /// the dense path predicts the mask directly.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &MpgConfig,
        mid_channels: usize,
        dense_channels: usize,
    ) -> Result<Self> {
        if cfg.k == 0 || cfg.c_r == 0 || cfg.c_o == 0 || cfg.pyramid.is_empty() {
            return dim_err(format!("invalid prompt generator config {cfg:?}"));
        }
        let c_r = cfg.c_r;
        let reduce = Conv1x1::new(store, rng, "mpg.reduce", mid_channels, c_r);
        let sparse = cfg.sparse.then(|| SparsePath {
            augment: Linear::new(store, rng, "mpg.augment", c_r, cfg.k * c_r),
            token_pos: store.add("mpg.token_pos", &[cfg.k, c_r], Init::Normal(0.1), rng),
            blocks: (0..cfg.blocks)
                .map(|i| DecoderBlock::new(store, rng, &format!("mpg.block{i}"), c_r, cfg.ffn_mult * c_r))
                .collect(),
            lift: Mlp::new(store, rng, "mpg.lift", c_r, cfg.c_o, cfg.c_o),
        });
        let dense_in = Conv1x1::new(store, rng, "mpg.dense_in", 2 * c_r + 1, c_r);
        let fem = Fem::new(store, rng, "mpg.fem", c_r, &cfg.pyramid);
        let dense_out = Conv1x1::new(store, rng, "mpg.dense_out", c_r, dense_channels);
        Ok(Self { cfg: cfg.clone(), reduce, sparse, dense_in, fem, dense_out })
    }

    /// Channel-concatenates the mid-level maps and applies conv1x1 + ReLU.
    pub fn reduce<T: Scalar>(&self, ctx: &mut Ctx<T>, f1: Var, f2: Var) -> Result<Var> {
        let (a, b) = (ctx.value(f1).shape(), ctx.value(f2).shape());
        if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
            return dim_err(format!("mid-level maps {a:?} and {b:?} differ spatially"));
        }
        let cat = ctx.tape.concat_rows(&[f1, f2])?;
        let y = self.reduce.forward(ctx, cat)?;
        ctx.tape.relu(y)
    }

    /// `p̂ˢ (c_r)` → `k×c_r`.
    pub fn augment<T: Scalar>(&self, ctx: &mut Ctx<T>, proto: Var) -> Result<Var> {
        let sp = self.sparse.as_ref().ok_or_else(|| crate::Error::Contract("sparse path disabled".into()))?;
        let c_r = self.cfg.c_r;
        let row = ctx.tape.reshape(proto, &[1, c_r])?;
        let y = sp.augment.forward(ctx, row)?;
        ctx.tape.reshape(y, &[self.cfg.k, c_r])
    }

    /// `E^aug (k×c_r)`, `f̂ᑫ (c_r×h×w)` → `E^spa (k×c_o)`.
    pub fn sparse_path<T: Scalar>(&self, ctx: &mut Ctx<T>, e_aug: Var, fq: Var) -> Result<Var> {
        let sp = self.sparse.as_ref().ok_or_else(|| crate::Error::Contract("sparse path disabled".into()))?;
        let [c, h, w] = *ctx.value(fq).shape() else {
            return dim_err("sparse path query must be c×h×w");
        };
        let pos = ctx.p(sp.token_pos)?;
        let mut tokens = ctx.tape.add(e_aug, pos)?;
        let flat = ctx.tape.reshape(fq, &[c, h * w])?;
        let mem = ctx.tape.transpose(flat)?;
        let pe = ctx.constant(sine_encoding(h * w, c))?;
        let mem = ctx.tape.add(mem, pe)?;
        for b in &sp.blocks {
            tokens = b.forward(ctx, tokens, mem)?;
        }
        let e = sp.lift.forward(ctx, tokens)?;
        let s = ctx.tape.sin(e)?;
        ctx.tape.add(e, s)
    }

    /// Differentiable masked mean of `c×h×w` maps over shots with nonempty masks.
    pub fn masked_mean<T: Scalar>(ctx: &mut Ctx<T>, maps: &[Var], masks: &[Mask]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        let mut used = 0usize;
        let mut c = 0;
        for (&m, mask) in maps.iter().zip(masks) {
            let [ch, h, w] = *ctx.value(m).shape() else {
                return dim_err("masked mean input must be c×h×w");
            };
            c = ch;
            if mask.dims() != (h, w) {
                return dim_err(format!("mask {:?} vs map {h}x{w}", mask.dims()));
            }
            let n = mask.count();
            if n == 0 {
                continue;
            }
            let weights: Vec<T> = mask.data().iter().map(|&b| if b { T::one() / T::of(n as f64) } else { T::zero() }).collect();
            let wv = ctx.constant(Tensor::new(&[h * w, 1], weights)?)?;
            let flat = ctx.tape.reshape(m, &[ch, h * w])?;
            let p = ctx.tape.matmul(flat, wv)?;
            acc = Some(match acc {
                Some(a) => ctx.tape.add(a, p)?,
                None => p,
            });
            used += 1;
        }
        match acc {
            Some(a) => {
                let a = ctx.tape.scale(a, 1.0 / used as f64)?;
                ctx.tape.reshape(a, &[c])
            }
            None => ctx.constant(Tensor::zeros(&[c])),
        }
    }

    /// Prior mask from transformed high-level features.
    pub fn prior_mask<T: Scalar>(
        ctx: &mut Ctx<T>,
        support: &[Var],
        masks: &[Mask],
        query: Var,
    ) -> Result<(Var, PriorMaskFlags)> {
        let fg: Vec<Vec<bool>> = masks.iter().map(|m| m.data().to_vec()).collect();
        ctx.tape.prior_mask(support, &fg, query)
    }

    /// `(p̂ˢ, f̂ᑫ, M^pr)` → dense embedding.
    pub fn dense_path<T: Scalar>(&self, ctx: &mut Ctx<T>, proto: Var, fq: Var, prior: Var) -> Result<Var> {
        let [c, h, w] = *ctx.value(fq).shape() else {
            return dim_err("dense path query must be c×h×w");
        };
        let tiled = ctx.tape.tile_cols(proto, h * w)?;
        let tiled = ctx.tape.reshape(tiled, &[c, h, w])?;
        let cat = ctx.tape.concat_rows(&[tiled, fq, prior])?;
        let y = self.dense_in.forward(ctx, cat)?;
        let y = ctx.tape.relu(y)?;
        let y = self.fem.forward(ctx, y)?;
        self.dense_out.forward(ctx, y)
    }

    pub fn generate<T: Scalar>(&self, ctx: &mut Ctx<T>, inp: &MpgInputs) -> Result<PromptEmbeddings> {
        if inp.support.len() != inp.masks.len() || inp.support.is_empty() {
            return dim_err("one mask per support shot required");
        }
        let mut reduced = Vec::with_capacity(inp.support.len());
        for s in inp.support {
            reduced.push(self.reduce(ctx, s[0], s[1])?);
        }
        let fq = self.reduce(ctx, inp.query[0], inp.query[1])?;
        let proto = Self::masked_mean(ctx, &reduced, inp.masks)?;
        let sparse = match self.sparse {
            Some(_) => {
                let e_aug = self.augment(ctx, proto)?;
                Some(self.sparse_path(ctx, e_aug, fq)?)
            }
            None => None,
        };
        let highs: Vec<Var> = inp.support.iter().map(|s| s[2]).collect();
        let (prior, prior_flags) = Self::prior_mask(ctx, &highs, inp.masks, inp.query[2])?;
        let dense = self.dense_path(ctx, proto, fq, prior)?;
        Ok(PromptEmbeddings { sparse, dense, prior, prior_flags, prototype: proto })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sine_encoding_first_rows() {
        let pe = sine_encoding::<f64>(2, 4);
        assert_eq!(pe.data()[..4], [0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(&[1, 3]) - (1.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn desk_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let cfg = MpgConfig::desk();
        let mpg = Mpg::new(&mut store, &mut rng, &cfg, 96, cfg.c_o).unwrap();
        let mut ctx = Ctx::new(&store);
        let mut map = |c: usize, seed: f64| {
            let data: Vec<f64> = (0..c * 256).map(|i| ((i as f64) * 0.37 + seed).sin()).collect();
            ctx.constant(Tensor::new(&[c, 16, 16], data).unwrap()).unwrap()
        };
        let s = [map(48, 0.1), map(48, 0.2), map(32, 0.3)];
        let q = [map(48, 0.4), map(48, 0.5), map(32, 0.6)];
        let masks = [Mask::from_fn(16, 16, |y, x| y > 4 && x < 9)];
        let e = mpg.generate(&mut ctx, &MpgInputs { support: &[s], query: q, masks: &masks }).unwrap();
        assert_eq!(ctx.value(e.sparse.unwrap()).shape(), &[4, 32]);
        assert_eq!(ctx.value(e.dense).shape(), &[32, 16, 16]);
    }
}
