//! Layers built on the tape: linear, 1×1 convolution, layer norm, single-head
//! attention and a two-layer MLP.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::tensor::{Init, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Forward-pass context: a fresh tape plus a read-only view of the parameters.
/// Each parameter is bound to the tape at most once.
pub struct Ctx<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a ParamStore<T>,
    bound: HashMap<ParamId, Var>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Self { tape: Tape::new(), params, bound: HashMap::new() }
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let v = self.params.bind(&mut self.tape, id)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}

/// `y = x·W + b` on row vectors; `W` is stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[input, output], Init::Xavier(input, output), rng);
        let b = store.add(&format!("{name}.b"), &[output], Init::Zeros, rng);
        Self { w, b, input, output }
    }

    /// `x`: `n×input`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w)?;
        let b = ctx.p(self.b)?;
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_trail(y, b)
    }
}

/// Per-pixel linear map on `c×h×w` maps; weight stored `out×in`.
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Conv1x1 {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[output, input], Init::Xavier(input, output), rng);
        let b = store.add(&format!("{name}.b"), &[output], Init::Zeros, rng);
        Self { w, b, input, output }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w)?;
        let b = ctx.p(self.b)?;
        conv1x1(&mut ctx.tape, x, w, b)
    }
}

/// 1×1 convolution of `x: c_in×h×w` with `w: c_out×c_in` and `bias: c_out`.
pub fn conv1x1<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, bias: Var) -> Result<Var> {
    let (h, wd) = match *tape.value(x).shape() {
        [_, h, w] => (h, w),
        ref s => return dim_err(format!("conv1x1 input must be c×h×w, got {s:?}")),
    };
    let cin = tape.value(x).shape()[0];
    let wshape = tape.value(w).shape().to_vec();
    if wshape.len() != 2 || wshape[1] != cin {
        return dim_err(format!("conv1x1 weight {wshape:?} vs {cin} input channels"));
    }
    let flat = tape.reshape(x, &[cin, h * wd])?;
    let y = tape.matmul(w, flat)?;
    let y = tape.add_lead(y, bias)?;
    tape.reshape(y, &[wshape[0], h, wd])
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize) -> Self {
        let gain = store.add(&format!("{name}.g"), &[dim], Init::Ones, rng);
        let bias = store.add(&format!("{name}.b"), &[dim], Init::Zeros, rng);
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let g = ctx.p(self.gain)?;
        let b = ctx.p(self.bias)?;
        let y = ctx.tape.layer_norm_rows(x, LAYER_NORM_EPS)?;
        let y = ctx.tape.mul_trail(y, g)?;
        ctx.tape.add_trail(y, b)
    }
}

/// Single-head scaled dot-product attention with an internal width that may
/// differ from the model width.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub inner: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        inner: usize,
    ) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, inner),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, inner),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, inner),
            out: Linear::new(store, rng, &format!("{name}.o"), inner, dim),
            inner,
        }
    }

    /// `queries: nq×d`, `keys`/`values: nk×d` → `nq×d`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, queries: Var, keys: Var, values: Var) -> Result<Var> {
        let q = self.q.forward(ctx, queries)?;
        let k = self.k.forward(ctx, keys)?;
        let v = self.v.forward(ctx, values)?;
        let kt = ctx.tape.transpose(k)?;
        let s = ctx.tape.matmul(q, kt)?;
        let s = ctx.tape.scale(s, 1.0 / (self.inner as f64).sqrt())?;
        let a = ctx.tape.softmax_rows(s)?;
        let o = ctx.tape.matmul(a, v)?;
        self.out.forward(ctx, o)
    }
}

/// `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), input, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, output),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.relu(h)?;
        self.fc2.forward(ctx, h)
    }
}
