// Wengert-style tape: every forward op appends a node holding its value and
// the recipe needed to push gradients back to its inputs.

use super::kernels;
use super::{ParamId, Scalar, Tensor, COSINE_EPS};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Prior-mask values whose max-min range falls below this are treated as a
/// constant map.
pub const PRIOR_RANGE_EPS: f64 = 1e-6;

/// Floor on column norms in [`Tape::normalize_cols`].
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddLead(Var, Var),
    AddTrail(Var, Var),
    MulTrail(Var, Var),
    TileCols(Var),
    Relu(Var),
    Sigmoid(Var),
    Sin(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<T> },
    NormalizeCols { x: Var, norms: Vec<T> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    CosineMap(Var, Var),
    Bilinear { x: Var, c: usize, h: usize, w: usize },
    AvgPool { x: Var, c: usize, h: usize, w: usize },
    PriorMask(Box<PriorMaskRecord<T>>),
}

#[derive(Debug)]
struct PriorMaskRecord<T> {
    supports: Vec<Var>,
    query: Var,
    /// Per query location: (support shot, support column).
    best: Vec<(usize, usize)>,
    raw: Vec<T>,
    lo_idx: usize,
    hi_idx: usize,
    range: T,
}

/// Outcome flags of [`Tape::prior_mask`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PriorMaskFlags {
    /// No support foreground location existed; the map is uniform 0.5.
    pub empty_support: bool,
    /// Similarities were constant over the query; the map is uniform 0.5.
    pub constant: bool,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parameter leaves registered on this tape.
    pub fn param_leaves(&self) -> &[(Var, ParamId)] {
        &self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            op => inputs(op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, "constant")
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        let v = self.push(t, Op::Leaf, "leaf")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub(crate) fn param_leaf(&mut self, id: ParamId, t: Tensor<T>) -> Result<Var> {
        let v = self.leaf(t)?;
        self.params.push((v, id));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    /// `x[i, ..] += b[i]`: bias indexed by the leading axis (channels).
    pub fn add_lead(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, n) = self.value(x).as_matrix();
        if self.value(b).len() != r {
            return dim_err(format!("add_lead: {} rows vs bias {}", r, self.value(b).len()));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for (row, &bv) in out.data_mut().chunks_mut(n).zip(bias) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        self.push(out, Op::AddLead(x, b), "add_lead")
    }

    /// `x[.., j] += b[j]`: bias broadcast over the rows of a matrix.
    pub fn add_trail(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.value(x).as_matrix();
        if self.value(b).len() != n {
            return dim_err(format!("add_trail: {} cols vs bias {}", n, self.value(b).len()));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
        }
        self.push(out, Op::AddTrail(x, b), "add_trail")
    }

    /// `x[.., j] *= g[j]`.
    pub fn mul_trail(&mut self, x: Var, g: Var) -> Result<Var> {
        let (_, n) = self.value(x).as_matrix();
        if self.value(g).len() != n {
            return dim_err(format!("mul_trail: {} cols vs gain {}", n, self.value(g).len()));
        }
        let gain = self.value(g).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(gain).for_each(|(v, &gv)| *v *= gv);
        }
        self.push(out, Op::MulTrail(x, g), "mul_trail")
    }

    /// Repeat a length-`c` vector into `n` columns, giving `c×n`.
    pub fn tile_cols(&mut self, v: Var, n: usize) -> Result<Var> {
        let src = self.value(v);
        let c = src.len();
        let mut data = Vec::with_capacity(c * n);
        for &x in src.data() {
            data.extend(std::iter::repeat_n(x, n));
        }
        let out = Tensor::new(&[c, n], data)?;
        self.push(out, Op::TileCols(v), "tile_cols")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.sin());
        self.push(out, Op::Sin(a), "sin")
    }

    /// Softmax along the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.value(a).as_matrix();
        if n == 0 {
            return dim_err("softmax over an empty axis");
        }
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::SoftmaxRows(a), "softmax")
    }

    /// Zero-mean, unit-variance normalization of each row (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, n) = self.value(a).as_matrix();
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(r);
        let nf = T::of(n as f64);
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + T::of(eps)).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNormRows { x: a, inv_std }, "layer_norm")
    }

    /// Scale every column of a `c×m` matrix to unit length.
    pub fn normalize_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return dim_err(format!("normalize_cols needs a matrix, got {:?}", t.shape()));
        }
        let (c, m) = (t.shape()[0], t.shape()[1]);
        let norms = kernels::column_norms(t.data(), c, m);
        let mut out = t.clone();
        let eps = T::of(NORMALIZE_EPS);
        for row in out.data_mut().chunks_mut(m) {
            for (v, &n) in row.iter_mut().zip(&norms) {
                *v /= n.max(eps);
            }
        }
        self.push(out, Op::NormalizeCols { x: a, norms }, "normalize_cols")
    }

    /// Stack along the leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of nothing");
        };
        let trail: Vec<usize> = self.value(first).shape().iter().skip(1).copied().collect();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.ndim() == 0 || t.shape()[1..] != trail[..] {
                return dim_err(format!("concat: {:?} vs trailing {:?}", t.shape(), trail));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(trail);
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat")
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, n) = t.as_matrix();
        if t.ndim() == 0 || start + len > r {
            return dim_err(format!("slice {start}..{} of {} rows", start + len, r));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(&shape, t.data()[start * n..(start + len) * n].to_vec())?;
        self.push(out, Op::SliceRows { x: a, start }, "slice")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Differentiable [`super::cosine_map`].
    pub fn cosine_map(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::cosine_map(self.value(a), self.value(b))?;
        self.push(out, Op::CosineMap(a, b), "cosine_map")
    }

    /// Corner-aligned bilinear resize of a `c×h×w` map.
    pub fn bilinear_resize(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        let t = self.value(a);
        let (c, h, w) = chw(t)?;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return dim_err(format!("resize {:?} to {oh}x{ow}", t.shape()));
        }
        let data = kernels::bilinear_resize(t.data(), c, h, w, oh, ow);
        let out = Tensor::new(&[c, oh, ow], data)?;
        self.push(out, Op::Bilinear { x: a, c, h, w }, "bilinear_resize")
    }

    pub fn adaptive_avg_pool(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        let t = self.value(a);
        let (c, h, w) = chw(t)?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return dim_err(format!("adaptive pool {:?} to {oh}x{ow}", t.shape()));
        }
        let data = kernels::adaptive_avg_pool(t.data(), c, h, w, oh, ow);
        let out = Tensor::new(&[c, oh, ow], data)?;
        self.push(out, Op::AvgPool { x: a, c, h, w }, "adaptive_avg_pool")
    }

    /// For each query location, the largest cosine similarity to any support
    /// foreground location, min-max normalized over the query map. Output is
    /// `1×h×w`. `fg[s][j]` marks column `j` of support shot `s` as foreground.
    pub fn prior_mask(
        &mut self,
        supports: &[Var],
        fg: &[Vec<bool>],
        query: Var,
    ) -> Result<(Var, PriorMaskFlags)> {
        let (c, h, w) = chw(self.value(query))?;
        let nq = h * w;
        if supports.len() != fg.len() {
            return dim_err("prior_mask: one mask per support shot required");
        }
        let mut best_val = vec![T::neg_infinity(); nq];
        let mut best = vec![(usize::MAX, 0usize); nq];
        for (s, (&sv, mask)) in supports.iter().zip(fg).enumerate() {
            let st = self.value(sv);
            let (sc, sn) = st.as_matrix();
            if sc != c || mask.len() != sn {
                return dim_err(format!(
                    "prior_mask: support {:?} / mask {} vs query {:?}",
                    st.shape(),
                    mask.len(),
                    self.value(query).shape()
                ));
            }
            let fg_cols: Vec<usize> = (0..sn).filter(|&j| mask[j]).collect();
            if fg_cols.is_empty() {
                continue;
            }
            let sel: Vec<T> = (0..c)
                .flat_map(|ch| fg_cols.iter().map(move |&j| (ch, j)))
                .map(|(ch, j)| st.data()[ch * sn + j])
                .collect();
            let sim = kernels::cosine_matrix(self.value(query).data(), &sel, c, nq, fg_cols.len());
            for i in 0..nq {
                let row = &sim[i * fg_cols.len()..(i + 1) * fg_cols.len()];
                let k = kernels::argmax(row);
                if row[k] > best_val[i] {
                    best_val[i] = row[k];
                    best[i] = (s, fg_cols[k]);
                }
            }
        }
        let half = T::of(0.5);
        let mut flags = PriorMaskFlags::default();
        if best.iter().any(|b| b.0 == usize::MAX) {
            flags.empty_support = true;
            let out = Tensor::full(&[1, h, w], half);
            return Ok((self.constant(out)?, flags));
        }
        let lo_idx = argmin(&best_val);
        let hi_idx = kernels::argmax(&best_val);
        let range = best_val[hi_idx] - best_val[lo_idx];
        if range.f64() < PRIOR_RANGE_EPS {
            flags.constant = true;
            let out = Tensor::full(&[1, h, w], half);
            return Ok((self.constant(out)?, flags));
        }
        let lo = best_val[lo_idx];
        let data = best_val.iter().map(|&v| (v - lo) / range).collect();
        let out = Tensor::new(&[1, h, w], data)?;
        let rec = PriorMaskRecord {
            supports: supports.to_vec(),
            query,
            best,
            raw: best_val,
            lo_idx,
            hi_idx,
            range,
        };
        let v = self.push(out, Op::PriorMask(Box::new(rec)), "prior_mask")?;
        Ok((v, flags))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    self.acc(grads, *a, kernels::matmul_a_bt(g, tb.data(), m, n, k));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, kernels::matmul_at_b(ta.data(), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                self.acc(grads, *a, kernels::transpose(g, s[0], s[1]));
            }
            Op::Reshape(a) | Op::AddScalar(a) => self.acc(grads, *a, g.to_vec()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, g.iter().zip(db).map(|(&gv, &y)| gv * y).collect());
                self.acc(grads, *b, g.iter().zip(da).map(|(&gv, &x)| gv * x).collect());
            }
            Op::Div(a, b) => {
                let db = self.value(*b).data();
                self.acc(grads, *a, g.iter().zip(db).map(|(&gv, &y)| gv / y).collect());
                let gb = g
                    .iter()
                    .zip(out)
                    .zip(db)
                    .map(|((&gv, &q), &y)| -gv * q / y)
                    .collect();
                self.acc(grads, *b, gb);
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.iter().map(|&v| v * *s).collect()),
            Op::AddLead(x, b) => {
                self.acc(grads, *x, g.to_vec());
                if self.needs(*b) {
                    let (_, n) = node.value.as_matrix();
                    let gb = g.chunks(n).map(|row| row.iter().copied().sum()).collect();
                    self.acc(grads, *b, gb);
                }
            }
            Op::AddTrail(x, b) => {
                self.acc(grads, *x, g.to_vec());
                if self.needs(*b) {
                    let (_, n) = node.value.as_matrix();
                    let mut gb = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::MulTrail(x, gain) => {
                let (_, n) = node.value.as_matrix();
                let gv = self.value(*gain).data();
                if self.needs(*x) {
                    let mut gx = g.to_vec();
                    for row in gx.chunks_mut(n) {
                        row.iter_mut().zip(gv).for_each(|(a, &s)| *a *= s);
                    }
                    self.acc(grads, *x, gx);
                }
                if self.needs(*gain) {
                    let xv = self.value(*x).data();
                    let mut gg = vec![T::zero(); n];
                    for (grow, xrow) in g.chunks(n).zip(xv.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * xrow[j];
                        }
                    }
                    self.acc(grads, *gain, gg);
                }
            }
            Op::TileCols(v) => {
                let n = node.value.shape()[1];
                self.acc(grads, *v, g.chunks(n).map(|row| row.iter().copied().sum()).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let gx = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.acc(grads, *a, gx);
            }
            Op::Sigmoid(a) => {
                let gx = g.iter().zip(out).map(|(&gv, &y)| gv * y * (T::one() - y)).collect();
                self.acc(grads, *a, gx);
            }
            Op::Sin(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, g.iter().zip(x).map(|(&gv, &xv)| gv * xv.cos()).collect());
            }
            Op::SoftmaxRows(a) => {
                let (_, n) = node.value.as_matrix();
                let mut gx = vec![T::zero(); g.len()];
                for ((grow, yrow), dst) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = yrow[j] * (grow[j] - s);
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::LayerNormRows { x, inv_std } => {
                let (_, n) = node.value.as_matrix();
                let nf = T::of(n as f64);
                let mut gx = vec![T::zero(); g.len()];
                for (r, ((grow, yrow), dst)) in
                    g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)).enumerate()
                {
                    let mg = grow.iter().copied().sum::<T>() / nf;
                    let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for j in 0..n {
                        dst[j] = inv_std[r] * (grow[j] - mg - yrow[j] * mgy);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::NormalizeCols { x, norms } => {
                let m = norms.len();
                let c = g.len() / m;
                let eps = T::of(NORMALIZE_EPS);
                let mut gx = vec![T::zero(); g.len()];
                for j in 0..m {
                    let yg: T = (0..c).map(|r| out[r * m + j] * g[r * m + j]).sum();
                    for r in 0..c {
                        let k = r * m + j;
                        gx[k] = if norms[j] > eps {
                            (g[k] - out[k] * yg) / norms[j]
                        } else {
                            g[k] / eps
                        };
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let (_, n) = src.as_matrix();
                let mut gx = vec![T::zero(); src.len()];
                gx[start * n..start * n + g.len()].copy_from_slice(g);
                self.acc(grads, *x, gx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![g[0]; n]);
            }
            Op::CosineMap(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.len();
                let n = tb.len() / c;
                let mut ga = vec![T::zero(); c];
                let mut gb = vec![T::zero(); tb.len()];
                let av = ta.data();
                for j in 0..n {
                    let bv = kernels::column(tb.data(), c, n, j);
                    let mut gbj = vec![T::zero(); c];
                    cosine_backward(av, &bv, g[j], &mut ga, &mut gbj);
                    for ch in 0..c {
                        gb[ch * n + j] += gbj[ch];
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Bilinear { x, c, h, w } => {
                let s = node.value.shape();
                let gx = kernels::bilinear_resize_backward(g, *c, *h, *w, s[1], s[2]);
                self.acc(grads, *x, gx);
            }
            Op::AvgPool { x, c, h, w } => {
                let s = node.value.shape();
                let gx = kernels::adaptive_avg_pool_backward(g, *c, *h, *w, s[1], s[2]);
                self.acc(grads, *x, gx);
            }
            Op::PriorMask(rec) => self.prior_mask_backward(rec, g, grads),
        }
    }

    fn prior_mask_backward(&self, rec: &PriorMaskRecord<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let r = rec.range;
        let hi = rec.raw[rec.hi_idx];
        let lo = rec.raw[rec.lo_idx];
        let mut draw: Vec<T> = g.iter().map(|&gv| gv / r).collect();
        let mut dlo = T::zero();
        let mut dhi = T::zero();
        for (&gv, &raw) in g.iter().zip(&rec.raw) {
            dlo += gv * (raw - hi) / (r * r);
            dhi -= gv * (raw - lo) / (r * r);
        }
        draw[rec.lo_idx] += dlo;
        draw[rec.hi_idx] += dhi;

        let q = self.value(rec.query);
        let c = q.shape()[0];
        let nq = q.len() / c;
        let mut gq = vec![T::zero(); q.len()];
        let mut gs: Vec<Vec<T>> = rec.supports.iter().map(|&s| vec![T::zero(); self.value(s).len()]).collect();
        for i in 0..nq {
            let (s, j) = rec.best[i];
            let st = self.value(rec.supports[s]);
            let ns = st.len() / c;
            let qv = kernels::column(q.data(), c, nq, i);
            let sv = kernels::column(st.data(), c, ns, j);
            let mut gqi = vec![T::zero(); c];
            let mut gsj = vec![T::zero(); c];
            cosine_backward(&qv, &sv, draw[i], &mut gqi, &mut gsj);
            for ch in 0..c {
                gq[ch * nq + i] += gqi[ch];
                gs[s][ch * ns + j] += gsj[ch];
            }
        }
        self.acc(grads, rec.query, gq);
        for (&sv, gsv) in rec.supports.iter().zip(gs) {
            self.acc(grads, sv, gsv);
        }
    }
}

/// Accumulates `g·∂cos(a,b)/∂a` into `ga` and `g·∂cos(a,b)/∂b` into `gb`.
fn cosine_backward<T: Scalar>(a: &[T], b: &[T], g: T, ga: &mut [T], gb: &mut [T]) {
    let na = kernels::norm(a);
    let nb = kernels::norm(b);
    let dot = kernels::dot(a, b);
    let d = na * nb + T::of(COSINE_EPS);
    let k = dot / (d * d);
    for ch in 0..a.len() {
        let mut da = b[ch] / d;
        let mut db = a[ch] / d;
        if na > T::zero() {
            da -= k * nb * a[ch] / na;
        }
        if nb > T::zero() {
            db -= k * na * b[ch] / nb;
        }
        ga[ch] += g * da;
        gb[ch] += g * db;
    }
}

fn argmin<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn chw<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => dim_err(format!("expected a c×h×w map, got {:?}", t.shape())),
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddLead(a, b)
        | Op::AddTrail(a, b)
        | Op::MulTrail(a, b)
        | Op::CosineMap(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Reshape(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::TileCols(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Sin(a)
        | Op::SoftmaxRows(a)
        | Op::Sum(a) => vec![*a],
        Op::LayerNormRows { x, .. }
        | Op::NormalizeCols { x, .. }
        | Op::SliceRows { x, .. }
        | Op::Bilinear { x, .. }
        | Op::AvgPool { x, .. } => vec![*x],
        Op::ConcatRows(parts) => parts.clone(),
        Op::PriorMask(rec) => {
            let mut v = rec.supports.clone();
            v.push(rec.query);
            v
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node's value; zeros when the node
    /// was not reached.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        let shape = tape.value(v).shape();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}
