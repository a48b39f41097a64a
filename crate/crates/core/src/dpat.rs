//! Dual prototype anchor transformation.
//!
//! Per episode, each feature level gets a foreground/background prototype
//! matrix built from the support masks, optionally strengthened by pseudo
//! query prototypes. A learnable anchor matrix `A` then defines
//! `W = Ā·P̄⁺`, which maps the prototype directions onto the anchor
//! directions and is applied to every support and query feature vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::MultiLevelFeatures;
use crate::error::{dim_err, Result};
use crate::mask::Mask;
use crate::nn::Ctx;
use crate::tensor::{kernels, linalg, Init, ParamId, ParamStore, Scalar, Tensor, Var, NORMALIZE_EPS};

/// How pseudo query prototypes are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoMode {
    /// Support prototypes only.
    None,
    /// Cycle-consistent selection.
    #[default]
    Ccs,
    /// Pooling over a coarse predicted query mask.
    PmMap,
}

impl PseudoMode {
    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Ccs => "ccs",
            Self::PmMap => "pm-map",
        }
    }
}

/// Foreground and background prototypes `[fg, bg]`, with empty-region flags.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMatrix<T> {
    pub fg: Vec<T>,
    pub bg: Vec<T>,
    pub fg_empty: bool,
    pub bg_empty: bool,
}

impl<T: Scalar> PrototypeMatrix<T> {
    pub fn empty(c: usize) -> Self {
        Self { fg: vec![T::zero(); c], bg: vec![T::zero(); c], fg_empty: true, bg_empty: true }
    }

    pub fn channels(&self) -> usize {
        self.fg.len()
    }

    /// `c×2` matrix with columns `fg`, `bg`.
    pub fn to_tensor(&self) -> Tensor<T> {
        let data = self.fg.iter().zip(&self.bg).flat_map(|(&a, &b)| [a, b]).collect();
        Tensor::new(&[self.fg.len(), 2], data).expect("two columns")
    }
}

fn spatial<T: Scalar>(f: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => dim_err(format!("expected a c×h×w feature map, got {s:?}")),
    }
}

fn check_mask<T: Scalar>(f: &Tensor<T>, m: &Mask) -> Result<(usize, usize)> {
    let (c, h, w) = spatial(f)?;
    if m.dims() != (h, w) {
        return dim_err(format!("mask {:?} vs feature map {}x{}", m.dims(), h, w));
    }
    Ok((c, h * w))
}

/// Mean of the feature vectors at the given flattened positions.
fn mean_at<T: Scalar>(f: &[T], c: usize, n: usize, positions: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    if positions.is_empty() {
        return out;
    }
    let inv = T::one() / T::of(positions.len() as f64);
    for (ch, o) in out.iter_mut().enumerate() {
        let row = &f[ch * n..(ch + 1) * n];
        *o = positions.iter().map(|&p| row[p]).sum::<T>() * inv;
    }
    out
}

/// Masked average pooling. Returns the prototype and whether the region was
/// empty (in which case the prototype is zero).
pub fn map_pool<T: Scalar>(f: &Tensor<T>, m: &Mask) -> Result<(Vec<T>, bool)> {
    let (c, n) = check_mask(f, m)?;
    let pos: Vec<usize> = (0..n).filter(|&i| m.data()[i]).collect();
    Ok((mean_at(f.data(), c, n, &pos), pos.is_empty()))
}

/// Average of per-shot masked pools; empty shots are skipped.
fn pooled_over_shots<T: Scalar>(fs: &[&Tensor<T>], masks: &[Mask]) -> Result<(Vec<T>, bool)> {
    let c = fs.first().map_or(0, |f| f.shape()[0]);
    let mut acc = vec![T::zero(); c];
    let mut used = 0usize;
    for (f, m) in fs.iter().zip(masks) {
        let (p, empty) = map_pool(f, m)?;
        if !empty {
            acc.iter_mut().zip(&p).for_each(|(a, &b)| *a += b);
            used += 1;
        }
    }
    if used > 0 {
        let inv = T::one() / T::of(used as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    Ok((acc, used == 0))
}

/// Support prototypes: foreground over the masks, background over their
/// complements, averaged across shots.
pub fn support_prototypes<T: Scalar>(fs: &[&Tensor<T>], masks: &[Mask]) -> Result<PrototypeMatrix<T>> {
    if fs.len() != masks.len() || fs.is_empty() {
        return dim_err(format!("{} support maps vs {} masks", fs.len(), masks.len()));
    }
    let (fg, fg_empty) = pooled_over_shots(fs, masks)?;
    let comps: Vec<Mask> = masks.iter().map(Mask::complement).collect();
    let (bg, bg_empty) = pooled_over_shots(fs, &comps)?;
    Ok(PrototypeMatrix { fg, bg, fg_empty, bg_empty })
}

/// Matched positions of one cycle-consistent selection.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchSet {
    /// For each support position in the region (ascending), its best query position.
    pub forward: Vec<usize>,
    /// For each forward match, the best support position for that query feature.
    pub reverse: Vec<usize>,
    /// Distinct query positions whose cycle returned into the region, ascending.
    pub kept: Vec<usize>,
}

/// Support-by-query cosine similarities (`n_s×n_q`).
pub fn similarity<T: Scalar>(fs: &Tensor<T>, fq: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, hs, ws) = spatial(fs)?;
    let (cq, hq, wq) = spatial(fq)?;
    if c != cq {
        return dim_err(format!("support {c} channels vs query {cq}"));
    }
    let (ns, nq) = (hs * ws, hq * wq);
    Tensor::new(&[ns, nq], kernels::cosine_matrix(fs.data(), fq.data(), c, ns, nq))
}

/// Cycle-consistent selection given precomputed similarities.
pub fn select_cycles<T: Scalar>(sim: &Tensor<T>, region: &[bool]) -> Result<MatchSet> {
    let (ns, nq) = (sim.shape()[0], sim.shape()[1]);
    if region.len() != ns {
        return dim_err(format!("region of {} cells vs {} support positions", region.len(), ns));
    }
    let s = sim.data();
    let mut reverse_of = vec![usize::MAX; nq];
    let mut out = MatchSet::default();
    let mut keep = vec![false; nq];
    for p in (0..ns).filter(|&p| region[p]) {
        let q = kernels::argmax(&s[p * nq..(p + 1) * nq]);
        if reverse_of[q] == usize::MAX {
            let mut best = 0;
            for j in 1..ns {
                if s[j * nq + q] > s[best * nq + q] {
                    best = j;
                }
            }
            reverse_of[q] = best;
        }
        let r = reverse_of[q];
        out.forward.push(q);
        out.reverse.push(r);
        if region[r] {
            keep[q] = true;
        }
    }
    out.kept = (0..nq).filter(|&q| keep[q]).collect();
    Ok(out)
}

/// Cycle-consistent selection of query positions for a support region.
/// Returns the match set and the pseudo prototype (mean query feature over
/// kept positions), or `None` when the region or the kept set is empty.
pub fn ccs<T: Scalar>(fs: &Tensor<T>, fq: &Tensor<T>, region: &Mask) -> Result<(MatchSet, Option<Vec<T>>)> {
    check_mask(fs, region)?;
    let sim = similarity(fs, fq)?;
    let m = select_cycles(&sim, region.data())?;
    let (c, h, w) = spatial(fq)?;
    let proto = (!m.kept.is_empty()).then(|| mean_at(fq.data(), c, h * w, &m.kept));
    Ok((m, proto))
}

/// Pseudo query prototypes from cycle-consistent selection: foreground with
/// the support masks as regions, background with their complements. Kept
/// sets are unioned across shots before pooling.
pub fn ccs_prototypes<T: Scalar>(
    fs: &[&Tensor<T>],
    masks: &[Mask],
    fq: &Tensor<T>,
) -> Result<(PrototypeMatrix<T>, Vec<[MatchSet; 2]>)> {
    let (c, h, w) = spatial(fq)?;
    let n = h * w;
    let mut union = [vec![false; n], vec![false; n]];
    let mut sets = Vec::with_capacity(fs.len());
    for (f, m) in fs.iter().zip(masks) {
        check_mask(f, m)?;
        let sim = similarity(f, fq)?;
        let comp = m.complement();
        let fg = select_cycles(&sim, m.data())?;
        let bg = select_cycles(&sim, comp.data())?;
        for (u, set) in union.iter_mut().zip([&fg, &bg]) {
            set.kept.iter().for_each(|&q| u[q] = true);
        }
        sets.push([fg, bg]);
    }
    let pos: Vec<Vec<usize>> = union.iter().map(|u| (0..n).filter(|&q| u[q]).collect()).collect();
    let proto = PrototypeMatrix {
        fg: mean_at(fq.data(), c, n, &pos[0]),
        bg: mean_at(fq.data(), c, n, &pos[1]),
        fg_empty: pos[0].is_empty(),
        bg_empty: pos[1].is_empty(),
    };
    Ok((proto, sets))
}

/// Pseudo query prototypes pooled over a coarse predicted mask
/// (`sigmoid(logits) > 0.5`, resampled to feature resolution).
pub fn pm_map_prototypes<T: Scalar>(logits: &Tensor<T>, fq: &Tensor<T>) -> Result<PrototypeMatrix<T>> {
    let (_, h, w) = spatial(fq)?;
    let pred = Mask::from_positive(logits)?.resize_nearest(h, w);
    let (fg, fg_empty) = map_pool(fq, &pred)?;
    let (bg, bg_empty) = map_pool(fq, &pred.complement())?;
    Ok(PrototypeMatrix { fg, bg, fg_empty, bg_empty })
}

/// Columnwise sum; an empty pseudo column leaves the support column unchanged.
pub fn fuse_prototypes<T: Scalar>(ps: &PrototypeMatrix<T>, pq: &PrototypeMatrix<T>) -> Result<PrototypeMatrix<T>> {
    if ps.channels() != pq.channels() {
        return dim_err(format!("fusing {} with {} channels", ps.channels(), pq.channels()));
    }
    let add = |s: &[T], q: &[T], empty: bool| -> Vec<T> {
        if empty {
            s.to_vec()
        } else {
            s.iter().zip(q).map(|(&a, &b)| a + b).collect()
        }
    };
    Ok(PrototypeMatrix {
        fg: add(&ps.fg, &pq.fg, pq.fg_empty),
        bg: add(&ps.bg, &pq.bg, pq.bg_empty),
        fg_empty: ps.fg_empty && pq.fg_empty,
        bg_empty: ps.bg_empty && pq.bg_empty,
    })
}

/// Scale each column of a matrix to unit length (norms floored at
/// [`NORMALIZE_EPS`]), matching [`crate::tensor::Tape::normalize_cols`].
pub fn normalize_columns<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let [r, c] = *m.shape() else {
        return dim_err(format!("expected a matrix, got {:?}", m.shape()));
    };
    let norms = kernels::column_norms(m.data(), r, c);
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(c) {
        row.iter_mut().zip(&norms).for_each(|(v, &n)| *v /= n.max(T::of(NORMALIZE_EPS)));
    }
    Ok(out)
}

/// Generalized inverse of the normalized prototype matrix.
#[derive(Clone, Debug)]
pub struct LevelTransform<T> {
    pub prototypes: PrototypeMatrix<T>,
    /// `P̄⁺`, `2×c`.
    pub pinv: Tensor<T>,
    pub lambda: f64,
    pub condition: f64,
}

impl<T: Scalar> LevelTransform<T> {
    pub fn new(prototypes: PrototypeMatrix<T>) -> Result<Self> {
        let p = normalize_columns(&prototypes.to_tensor())?;
        let r = linalg::pinv2(&p)?;
        Ok(Self { prototypes, pinv: r.pinv, lambda: r.lambda, condition: r.condition })
    }
}

/// `W = Ā·P̄⁺` for a prototype matrix and an anchor value (both `c×2`).
pub fn compute_w<T: Scalar>(pm: &PrototypeMatrix<T>, anchor: &Tensor<T>) -> Result<Tensor<T>> {
    if anchor.shape() != [pm.channels(), 2] {
        return dim_err(format!("anchor {:?} vs {} prototype channels", anchor.shape(), pm.channels()));
    }
    let lt = LevelTransform::new(pm.clone())?;
    normalize_columns(anchor)?.matmul(&lt.pinv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Mid,
    High,
}

/// Learnable `c×2` anchor matrix.
#[derive(Clone, Debug)]
pub struct AnchorLayer {
    pub a: ParamId,
    pub tier: Tier,
    pub channels: usize,
}

impl AnchorLayer {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c: usize, tier: Tier) -> Self {
        let a = store.add(name, &[c, 2], Init::Normal(1.0), rng);
        Self { a, tier, channels: c }
    }
}

/// Mid anchor for levels 1 and 2, high anchor for level 3.
#[derive(Clone, Debug)]
pub struct Anchors {
    pub mid: AnchorLayer,
    pub high: AnchorLayer,
}

impl Anchors {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, channels: [usize; 3]) -> Result<Self> {
        if channels[0] != channels[1] {
            return dim_err(format!(
                "mid anchor is shared by levels 1 and 2, which have {} and {} channels",
                channels[0], channels[1]
            ));
        }
        Ok(Self {
            mid: AnchorLayer::new(store, rng, "dpat.anchor_mid", channels[0], Tier::Mid),
            high: AnchorLayer::new(store, rng, "dpat.anchor_high", channels[2], Tier::High),
        })
    }

    pub fn for_level(&self, level: usize) -> &AnchorLayer {
        if level < 2 {
            &self.mid
        } else {
            &self.high
        }
    }
}

/// Per-level transformation matrices of one episode.
#[derive(Clone, Debug)]
pub struct TransformSet<T> {
    pub levels: [LevelTransform<T>; 3],
    /// `W_l`, `c_l×c_l`.
    pub w: [Tensor<T>; 3],
}

/// Where pseudo query prototypes come from for a transform.
#[derive(Clone, Debug)]
pub enum PseudoSource<T> {
    None,
    Ccs,
    Given(Box<[PrototypeMatrix<T>; 3]>),
}

/// Transformed features of an episode, recorded on the tape.
#[derive(Debug)]
pub struct Transformed<T> {
    /// Per shot, per level: `c_l×h×w`.
    pub support: Vec<[Var; 3]>,
    pub query: [Var; 3],
    pub set: TransformSet<T>,
    /// Per level, per shot: foreground and background match sets (CCS only).
    pub matches: Vec<Vec<[MatchSet; 2]>>,
}

/// Applies `Ā·(P̄⁺f)`; `P̄⁺f` is a constant of the episode.
fn apply<T: Scalar>(ctx: &mut Ctx<T>, a_bar: Var, pinv: &Tensor<T>, f: &Tensor<T>) -> Result<Var> {
    let (c, h, w) = spatial(f)?;
    let coeff = kernels::matmul(pinv.data(), f.data(), 2, c, h * w);
    let coeff = ctx.constant(Tensor::new(&[2, h * w], coeff)?)?;
    let y = ctx.tape.matmul(a_bar, coeff)?;
    ctx.tape.reshape(y, &[c, h, w])
}

/// Builds per-level prototype matrices and transforms support and query
/// features. `masks` are the support masks at feature resolution.
pub fn transform<T: Scalar>(
    ctx: &mut Ctx<T>,
    anchors: &Anchors,
    support: &[&MultiLevelFeatures<T>],
    masks: &[Mask],
    query: &MultiLevelFeatures<T>,
    pseudo: &PseudoSource<T>,
) -> Result<Transformed<T>> {
    let mut levels = Vec::with_capacity(3);
    let mut ws = Vec::with_capacity(3);
    let mut matches = Vec::new();
    let mut q_out = Vec::with_capacity(3);
    let mut s_out: Vec<Vec<Var>> = vec![Vec::with_capacity(3); support.len()];
    for l in 0..3 {
        let fs: Vec<&Tensor<T>> = support.iter().map(|f| &f.levels[l]).collect();
        let fq = &query.levels[l];
        let ps = support_prototypes(&fs, masks)?;
        let pm = match pseudo {
            PseudoSource::None => ps,
            PseudoSource::Ccs => {
                let (pq, sets) = ccs_prototypes(&fs, masks, fq)?;
                matches.push(sets);
                fuse_prototypes(&ps, &pq)?
            }
            PseudoSource::Given(pq) => fuse_prototypes(&ps, &pq[l])?,
        };
        let lt = LevelTransform::new(pm)?;
        let anchor = anchors.for_level(l);
        let a = ctx.p(anchor.a)?;
        let a_bar = ctx.tape.normalize_cols(a)?;
        ws.push(ctx.value(a_bar).matmul(&lt.pinv)?);
        q_out.push(apply(ctx, a_bar, &lt.pinv, fq)?);
        for (s, f) in fs.iter().enumerate() {
            s_out[s].push(apply(ctx, a_bar, &lt.pinv, f)?);
        }
        levels.push(lt);
    }
    let arr = |v: Vec<Var>| -> [Var; 3] { [v[0], v[1], v[2]] };
    let mut lv = levels.into_iter();
    let mut wv = ws.into_iter();
    let set = TransformSet {
        levels: [lv.next().expect("3"), lv.next().expect("3"), lv.next().expect("3")],
        w: [wv.next().expect("3"), wv.next().expect("3"), wv.next().expect("3")],
    };
    Ok(Transformed { support: s_out.into_iter().map(arr).collect(), query: arr(q_out), set, matches })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(c: usize, h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[c, h, w], v).unwrap()
    }

    #[test]
    fn map_pool_cases() {
        let f = fmap(2, 2, 2, &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let one = Mask::from_fn(2, 2, |y, x| y == 1 && x == 0);
        assert_eq!(map_pool(&f, &one).unwrap(), (vec![3.0, 7.0], false));
        assert_eq!(map_pool(&f, &Mask::full(2, 2)).unwrap().0, vec![2.5, 6.5]);
        let (z, empty) = map_pool(&f, &Mask::empty(2, 2)).unwrap();
        assert!(empty && z == vec![0.0, 0.0]);
    }

    #[test]
    fn ccs_hand_example() {
        // Support s0=(1,0) in region, s1=(0,1) outside; query q0=(0.8,0.6), q1=(-1,0).
        let fs = fmap(2, 1, 2, &[1., 0., 0., 1.]);
        let fq = fmap(2, 1, 2, &[0.8, -1., 0.6, 0.]);
        let region = Mask::new(1, 2, vec![true, false]).unwrap();
        let (m, p) = ccs(&fs, &fq, &region).unwrap();
        assert_eq!(m.forward, vec![0]);
        assert_eq!(m.reverse, vec![0]);
        assert_eq!(m.kept, vec![0]);
        assert_eq!(p.unwrap(), vec![0.8, 0.6]);
    }

    #[test]
    fn self_matching_recovers_map_prototype() {
        let f = fmap(2, 2, 2, &[1., 0., 2., -1., 0., 1., 1., 3.]);
        let region = Mask::from_fn(2, 2, |y, _| y == 0);
        let (m, p) = ccs(&f, &f, &region).unwrap();
        assert_eq!(m.kept, vec![0, 1]);
        assert_eq!(p.unwrap(), map_pool(&f, &region).unwrap().0);
    }

    #[test]
    fn fusion_falls_back_on_empty_column() {
        let ps = PrototypeMatrix { fg: vec![1.0, 2.0], bg: vec![3.0, 4.0], fg_empty: false, bg_empty: false };
        let pq = PrototypeMatrix { fg: vec![0.5, 0.5], bg: vec![9.0, 9.0], fg_empty: false, bg_empty: true };
        let pm = fuse_prototypes(&ps, &pq).unwrap();
        assert_eq!(pm.fg, vec![1.5, 2.5]);
        assert_eq!(pm.bg, vec![3.0, 4.0]);
        let pm2 = fuse_prototypes(&ps, &ps).unwrap();
        assert_eq!(pm2.fg, vec![2.0, 4.0]);
    }

    #[test]
    fn identity_w_for_identity_inputs() {
        let pm = PrototypeMatrix { fg: vec![1.0, 0.0], bg: vec![0.0, 1.0], fg_empty: false, bg_empty: false };
        let w = compute_w(&pm, &Tensor::<f64>::eye(2)).unwrap();
        assert!(w.max_abs_diff(&Tensor::eye(2)) < 1e-15);
    }

    #[test]
    fn pm_map_uses_thresholded_logits() {
        let f = fmap(1, 2, 2, &[1., 2., 3., 4.]);
        let logits = Tensor::from_f64(&[1, 4, 4], &[
            1., 1., -1., -1., 1., 1., -1., -1., -1., -1., -1., -1., -1., -1., -1., -1.,
        ])
        .unwrap();
        let p = pm_map_prototypes(&logits, &f).unwrap();
        assert_eq!(p.fg, vec![1.0]);
        assert_eq!(p.bg, vec![3.0]);
        let none = pm_map_prototypes(&Tensor::full(&[1, 4, 4], -2.0), &f).unwrap();
        assert!(none.fg_empty && !none.bg_empty);
    }
}
