//! Prompt-conditioned mask decoder.
//!
//! Tokens are a learned mask token followed by the sparse prompts. Two-way
//! blocks alternate token self-attention, token-to-image attention, a token
//! MLP and image-to-token attention. The image embedding is upscaled 4× and
//! the mask token output, passed through a small hypernetwork, is dotted with
//! every upscaled location.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::nn::{Attention, Conv1x1, Ctx, LayerNorm, Mlp};
use crate::tensor::{Init, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// When disabled, the dense path predicts the mask directly.
    pub enabled: bool,
    pub blocks: usize,
    /// Token MLP width as a multiple of `c_o`.
    pub mlp_mult: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { enabled: true, blocks: 2, mlp_mult: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub to_image: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
    pub to_tokens: Attention,
    pub norm4: LayerNorm,
}

impl TwoWayBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, d: usize, mlp: usize) -> Self {
        let inner = (d / 2).max(1);
        Self {
            self_attn: Attention::new(store, rng, &format!("{name}.self"), d, inner),
            norm1: LayerNorm::new(store, rng, &format!("{name}.ln1"), d),
            to_image: Attention::new(store, rng, &format!("{name}.t2i"), d, inner),
            norm2: LayerNorm::new(store, rng, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, mlp, d),
            norm3: LayerNorm::new(store, rng, &format!("{name}.ln3"), d),
            to_tokens: Attention::new(store, rng, &format!("{name}.i2t"), d, inner),
            norm4: LayerNorm::new(store, rng, &format!("{name}.ln4"), d),
        }
    }

    /// `tokens: t×d`, `image: n×d`. Returns updated `(tokens, image)`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, tokens: Var, image: Var) -> Result<(Var, Var)> {
        let a = self.self_attn.forward(ctx, tokens, tokens, tokens)?;
        let t = ctx.tape.add(tokens, a)?;
        let t = self.norm1.forward(ctx, t)?;
        let a = self.to_image.forward(ctx, t, image, image)?;
        let t = ctx.tape.add(t, a)?;
        let t = self.norm2.forward(ctx, t)?;
        let a = self.mlp.forward(ctx, t)?;
        let t = ctx.tape.add(t, a)?;
        let t = self.norm3.forward(ctx, t)?;
        let a = self.to_tokens.forward(ctx, image, t, t)?;
        let img = ctx.tape.add(image, a)?;
        let img = self.norm4.forward(ctx, img)?;
        Ok((t, img))
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub width: usize,
    pub project: Option<Conv1x1>,
    pub mask_token: ParamId,
    pub blocks: Vec<TwoWayBlock>,
    pub up1: Conv1x1,
    pub up2: Conv1x1,
    pub hyper: Mlp,
}

impl MaskDecoder {
    /// `c_o` must be divisible by 4.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &DecoderConfig,
        high_channels: usize,
        c_o: usize,
    ) -> Result<Self> {
        if c_o < 4 || !c_o.is_multiple_of(4) {
            return dim_err(format!("decoder width {c_o} must be a positive multiple of 4"));
        }
        let hyper = Mlp::new(store, rng, "dec.hyper", c_o, c_o, c_o / 4);
        // Logits start at zero so early Dice steps are not spent escaping a
        // saturated all-foreground prediction.
        let out = store.get_mut(hyper.fc2.w);
        out.value = Tensor::zeros(out.value.shape());
        let project = (high_channels != c_o).then(|| Conv1x1::new(store, rng, "dec.project", high_channels, c_o));
        Ok(Self {
            width: c_o,
            project,
            mask_token: store.add("dec.mask_token", &[1, c_o], Init::Normal(1.0), rng),
            blocks: (0..cfg.blocks)
                .map(|i| TwoWayBlock::new(store, rng, &format!("dec.block{i}"), c_o, cfg.mlp_mult.max(1) * c_o))
                .collect(),
            up1: Conv1x1::new(store, rng, "dec.up1", c_o, c_o / 2),
            up2: Conv1x1::new(store, rng, "dec.up2", c_o / 2, c_o / 4),
            hyper,
        })
    }

    /// `sparse: k×c_o` (optional), `dense: c_o×h×w`, `high: c₃×h×w` →
    /// logits `1×4h×4w`.
    pub fn decode<T: Scalar>(&self, ctx: &mut Ctx<T>, sparse: Option<Var>, dense: Var, high: Var) -> Result<Var> {
        let c_o = self.width;
        let [dc, h, w] = *ctx.value(dense).shape() else {
            return dim_err("dense embedding must be c×h×w");
        };
        if dc != c_o {
            return dim_err(format!("dense embedding has {dc} channels, decoder width is {c_o}"));
        }
        let img = match &self.project {
            Some(p) => p.forward(ctx, high)?,
            None => high,
        };
        if ctx.value(img).shape() != [c_o, h, w] {
            return dim_err(format!("image feature {:?} vs dense {:?}", ctx.value(img).shape(), [c_o, h, w]));
        }
        let img = ctx.tape.add(img, dense)?;
        let flat = ctx.tape.reshape(img, &[c_o, h * w])?;
        let mut image = ctx.tape.transpose(flat)?;
        let mask_token = ctx.p(self.mask_token)?;
        let mut tokens = match sparse {
            Some(s) => {
                let sw = ctx.value(s).shape();
                if sw.len() != 2 || sw[1] != c_o {
                    return dim_err(format!("sparse prompts {sw:?} vs width {c_o}"));
                }
                ctx.tape.concat_rows(&[mask_token, s])?
            }
            None => mask_token,
        };
        for b in &self.blocks {
            (tokens, image) = b.forward(ctx, tokens, image)?;
        }
        let img = ctx.tape.transpose(image)?;
        let img = ctx.tape.reshape(img, &[c_o, h, w])?;
        let up = ctx.tape.bilinear_resize(img, 2 * h, 2 * w)?;
        let up = self.up1.forward(ctx, up)?;
        let up = ctx.tape.relu(up)?;
        let up = ctx.tape.bilinear_resize(up, 4 * h, 4 * w)?;
        let up = self.up2.forward(ctx, up)?;
        let up = ctx.tape.relu(up)?;
        let out_token = ctx.tape.slice_rows(tokens, 0, 1)?;
        let hyper = self.hyper.forward(ctx, out_token)?;
        let up = ctx.tape.reshape(up, &[c_o / 4, 16 * h * w])?;
        let logits = ctx.tape.matmul(hyper, up)?;
        ctx.tape.reshape(logits, &[1, 4 * h, 4 * w])
    }
}
