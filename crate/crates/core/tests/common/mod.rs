//! Oracles and probe suites shared by the integration tests and the
//! acceptance target. Everything here is written against plain loops and
//! forward values so it stays independent of the code it checks.

#![allow(dead_code, clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

use apseg::dpat::{self, PrototypeMatrix};
use apseg::encoder::MultiLevelFeatures;
use apseg::gradcheck::{self, Report};
use apseg::mask::Mask;
use apseg::model::{ArchConfig, EpisodeInput, Model};
use apseg::nn::{self, Attention, Conv1x1, Ctx, LayerNorm, Linear, Mlp};
use apseg::tensor::{ParamStore, Tape, Tensor, Var, COSINE_EPS};
use apseg::trainer::dice_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, d).unwrap()
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, d).unwrap()
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap()
}

// ---------------------------------------------------------------- CCS oracle

/// Column `j` of a `c×n` (or `c×h×w`) tensor.
fn column(t: &Tensor<f64>, j: usize) -> Vec<f64> {
    let c = t.shape()[0];
    let n = t.len() / c;
    (0..c).map(|ch| t.data()[ch * n + j]).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt() + COSINE_EPS)
}

/// First index of the maximum.
fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, PartialEq, Eq)]
pub struct BruteMatches {
    pub forward: Vec<usize>,
    pub reverse: Vec<usize>,
    pub kept: Vec<usize>,
}

/// Double argmax by exhaustive search.
pub fn brute_ccs(fs: &Tensor<f64>, fq: &Tensor<f64>, region: &[bool]) -> BruteMatches {
    let ns = fs.len() / fs.shape()[0];
    let nq = fq.len() / fq.shape()[0];
    let s: Vec<Vec<f64>> = (0..ns).map(|j| column(fs, j)).collect();
    let q: Vec<Vec<f64>> = (0..nq).map(|j| column(fq, j)).collect();
    let mut forward = Vec::new();
    let mut reverse = Vec::new();
    let mut kept = Vec::new();
    for p in 0..ns {
        if !region[p] {
            continue;
        }
        let fwd = first_argmax(&q.iter().map(|qv| cos(&s[p], qv)).collect::<Vec<_>>());
        let back = first_argmax(&s.iter().map(|sv| cos(sv, &q[fwd])).collect::<Vec<_>>());
        forward.push(fwd);
        reverse.push(back);
        if region[back] && !kept.contains(&fwd) {
            kept.push(fwd);
        }
    }
    kept.sort_unstable();
    BruteMatches { forward, reverse, kept }
}

/// Random instance with `c ≤ 8`, spatial sides `≤ 6`, and duplicated
/// columns so that exact ties occur.
pub fn ccs_instance(rng: &mut impl Rng) -> (Tensor<f64>, Tensor<f64>, Mask) {
    let c = rng.random_range(1..=8);
    let (hs, ws) = (rng.random_range(1..=6), rng.random_range(1..=6));
    let (hq, wq) = (rng.random_range(1..=6), rng.random_range(1..=6));
    let mut fs = normal(rng, &[c, hs, ws]);
    let mut fq = normal(rng, &[c, hq, wq]);
    for t in [&mut fs, &mut fq] {
        let n = t.len() / c;
        if n > 1 && rng.random_bool(0.5) {
            for _ in 0..rng.random_range(1..=3) {
                let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
                for ch in 0..c {
                    let v = t.data()[ch * n + a];
                    t.data_mut()[ch * n + b] = v;
                }
            }
        }
    }
    let p = rng.random_range(0.1..0.9);
    let region = random_mask(rng, hs, ws, p);
    (fs, fq, region)
}

/// Runs `n` random instances; returns the first disagreement.
pub fn ccs_agreement(n: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for i in 0..n {
        let (fs, fq, region) = ccs_instance(&mut r);
        let (m, proto) = dpat::ccs(&fs, &fq, &region).map_err(|e| e.to_string())?;
        let b = brute_ccs(&fs, &fq, region.data());
        let got = BruteMatches { forward: m.forward, reverse: m.reverse, kept: m.kept };
        if got != b {
            return Err(format!("instance {i}: module {got:?} vs oracle {b:?}"));
        }
        if proto.is_some() == b.kept.is_empty() {
            return Err(format!("instance {i}: pseudo prototype presence disagrees with kept set"));
        }
    }
    Ok(())
}

// ------------------------------------------------------- anchor residual

fn unit_columns(m: &Tensor<f64>) -> Vec<[f64; 2]> {
    let c = m.shape()[0];
    let mut n = [0.0f64; 2];
    for r in 0..c {
        for k in 0..2 {
            n[k] += m.data()[2 * r + k].powi(2);
        }
    }
    (0..c).map(|r| [m.data()[2 * r] / n[0].sqrt(), m.data()[2 * r + 1] / n[1].sqrt()]).collect()
}

/// Largest `‖W·P̄ − Ā‖∞` over `n` random well-conditioned prototype matrices.
pub fn max_anchor_residual(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < n {
        let c = r.random_range(2..=64);
        let p = normal(&mut r, &[c, 2]);
        let pn = unit_columns(&p);
        let g12: f64 = pn.iter().map(|v| v[0] * v[1]).sum();
        // Gram of unit columns is [[1, g], [g, 1]]; condition (1+|g|)/(1−|g|).
        if (1.0 + g12.abs()) / (1.0 - g12.abs()) > 1e3 {
            continue;
        }
        let pm = PrototypeMatrix {
            fg: (0..c).map(|i| p.data()[2 * i]).collect(),
            bg: (0..c).map(|i| p.data()[2 * i + 1]).collect(),
            fg_empty: false,
            bg_empty: false,
        };
        let a = normal(&mut r, &[c, 2]);
        let an = unit_columns(&a);
        let w = dpat::compute_w(&pm, &a).unwrap();
        for i in 0..c {
            for k in 0..2 {
                let wp: f64 = (0..c).map(|j| w.data()[i * c + j] * pn[j][k]).sum();
                worst = worst.max((wp - an[i][k]).abs());
            }
        }
        done += 1;
    }
    worst
}

// ---------------------------------------------------------- gradient suite

/// `Σ x ⊙ R` with a fixed random `R`, so every output element matters.
fn weighted(t: &mut Tape<f64>, v: Var, seed: u64) -> apseg::Result<Var> {
    let shape = t.value(v).shape().to_vec();
    let r = normal(&mut rng(seed), &shape);
    let c = t.constant(r)?;
    let p = t.mul(v, c)?;
    t.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> apseg::Result<Var>>;

/// Every differentiable tape op with representative inputs.
fn op_cases(r: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], $f:expr) => {
            cases.push(($name, vec![$($inp),*], Box::new($f)))
        };
    }
    case!("matmul", [normal(r, &[3, 4]), normal(r, &[4, 2])], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted(t, y, 1)
    });
    case!("transpose", [normal(r, &[3, 5])], |t, v| {
        let y = t.transpose(v[0])?;
        weighted(t, y, 2)
    });
    case!("reshape", [normal(r, &[2, 3, 4])], |t, v| {
        let y = t.reshape(v[0], &[6, 4])?;
        weighted(t, y, 3)
    });
    case!("add", [normal(r, &[3, 3]), normal(r, &[3, 3])], |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted(t, y, 4)
    });
    case!("sub", [normal(r, &[3, 3]), normal(r, &[3, 3])], |t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted(t, y, 5)
    });
    case!("mul", [normal(r, &[3, 3]), normal(r, &[3, 3])], |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted(t, y, 6)
    });
    case!("div", [normal(r, &[3, 3]), uniform(r, &[3, 3], 0.5, 2.0)], |t, v| {
        let y = t.div(v[0], v[1])?;
        weighted(t, y, 7)
    });
    case!("scale", [normal(r, &[4])], |t, v| {
        let y = t.scale(v[0], -1.7)?;
        weighted(t, y, 8)
    });
    case!("add_scalar", [normal(r, &[4])], |t, v| {
        let y = t.add_scalar(v[0], 0.3)?;
        let y = t.mul(y, y)?;
        weighted(t, y, 9)
    });
    case!("add_lead", [normal(r, &[3, 2, 2]), normal(r, &[3])], |t, v| {
        let y = t.add_lead(v[0], v[1])?;
        let y = t.mul(y, y)?;
        weighted(t, y, 10)
    });
    case!("add_trail", [normal(r, &[4, 3]), normal(r, &[3])], |t, v| {
        let y = t.add_trail(v[0], v[1])?;
        let y = t.mul(y, y)?;
        weighted(t, y, 11)
    });
    case!("mul_trail", [normal(r, &[4, 3]), normal(r, &[3])], |t, v| {
        let y = t.mul_trail(v[0], v[1])?;
        weighted(t, y, 12)
    });
    case!("tile_cols", [normal(r, &[3])], |t, v| {
        let y = t.tile_cols(v[0], 5)?;
        let y = t.mul(y, y)?;
        weighted(t, y, 13)
    });
    case!("relu", [normal(r, &[5, 5])], |t, v| {
        let y = t.relu(v[0])?;
        weighted(t, y, 14)
    });
    case!("sigmoid", [normal(r, &[5, 5])], |t, v| {
        let y = t.sigmoid(v[0])?;
        weighted(t, y, 15)
    });
    case!("sin", [normal(r, &[5, 5])], |t, v| {
        let y = t.sin(v[0])?;
        weighted(t, y, 16)
    });
    case!("softmax_rows", [normal(r, &[3, 6])], |t, v| {
        let y = t.softmax_rows(v[0])?;
        weighted(t, y, 17)
    });
    case!("layer_norm_rows", [normal(r, &[3, 6])], |t, v| {
        let y = t.layer_norm_rows(v[0], 1e-5)?;
        weighted(t, y, 18)
    });
    case!("normalize_cols", [normal(r, &[5, 2])], |t, v| {
        let y = t.normalize_cols(v[0])?;
        weighted(t, y, 19)
    });
    case!("concat_rows", [normal(r, &[2, 3]), normal(r, &[1, 3])], |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        let y = t.mul(y, y)?;
        weighted(t, y, 20)
    });
    case!("slice_rows", [normal(r, &[5, 3])], |t, v| {
        let y = t.slice_rows(v[0], 1, 3)?;
        let y = t.mul(y, y)?;
        weighted(t, y, 21)
    });
    case!("sum", [normal(r, &[3, 3])], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    });
    case!("mean", [normal(r, &[3, 3])], |t, v| {
        let y = t.sin(v[0])?;
        t.mean(y)
    });
    case!("cosine_map", [normal(r, &[4]), normal(r, &[4, 3, 3])], |t, v| {
        let y = t.cosine_map(v[0], v[1])?;
        weighted(t, y, 22)
    });
    case!("bilinear_resize", [normal(r, &[2, 3, 4])], |t, v| {
        let y = t.bilinear_resize(v[0], 7, 5)?;
        weighted(t, y, 23)
    });
    case!("adaptive_avg_pool", [normal(r, &[2, 7, 5])], |t, v| {
        let y = t.adaptive_avg_pool(v[0], 3, 2)?;
        weighted(t, y, 24)
    });
    let fg = vec![vec![true, false, true, true, false, false, true, false, false]];
    case!("prior_mask", [normal(r, &[4, 9]), normal(r, &[4, 3, 3])], move |t, v| {
        let (y, _) = t.prior_mask(&[v[0]], &fg, v[1])?;
        weighted(t, y, 25)
    });
    let gt = Mask::from_fn(8, 8, |y, x| y > 2 && x < 5);
    case!("dice_loss", [normal(r, &[1, 4, 4])], move |t, v| dice_loss(t, v[0], &gt));
    case!("conv1x1", [normal(r, &[3, 2, 2]), normal(r, &[4, 3]), normal(r, &[4])], |t, v| {
        let y = nn::conv1x1(t, v[0], v[1], v[2])?;
        weighted(t, y, 26)
    });
    cases
}

/// Central-difference check of every op (3 probes per input) and of each
/// learnable module. Returns one report per case.
pub fn op_gradient_reports(seed: u64) -> Vec<(String, Report)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases(&mut r) {
        let rep = gradcheck::check_inputs(&inputs, |t, v| f(t, v), 3, &mut r).unwrap();
        out.push((name.to_string(), rep));
    }
    out.extend(module_gradient_reports(&mut r));
    out
}

fn module_gradient_reports(r: &mut ChaCha8Rng) -> Vec<(String, Report)> {
    let mut out = Vec::new();
    let mut check = |name: &str, store: ParamStore<f64>, f: &dyn Fn(&mut Ctx<f64>) -> apseg::Result<Var>, r: &mut ChaCha8Rng| {
        let coords = gradcheck::sample_coords(&store, 2, r);
        let rep = gradcheck::check_params(
            &store,
            |s, tape| {
                let mut ctx = Ctx::new(s);
                let y = f(&mut ctx)?;
                let loss = weighted(&mut ctx.tape, y, 99)?;
                *tape = ctx.into_tape();
                Ok(loss)
            },
            &coords,
        )
        .unwrap();
        out.push((name.to_string(), rep));
    };

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, r, "lin", 4, 3);
    let x = normal(r, &[5, 4]);
    check("Linear", store, &|c| {
        let xv = c.constant(x.clone())?;
        lin.forward(c, xv)
    }, r);

    let mut store = ParamStore::new();
    let conv = Conv1x1::new(&mut store, r, "conv", 3, 4);
    let x = normal(r, &[3, 3, 3]);
    check("Conv1x1", store, &|c| {
        let xv = c.constant(x.clone())?;
        conv.forward(c, xv)
    }, r);

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, r, "ln", 6);
    randomize(&mut store, r);
    let x = normal(r, &[4, 6]);
    check("LayerNorm", store, &|c| {
        let xv = c.constant(x.clone())?;
        ln.forward(c, xv)
    }, r);

    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, r, "att", 6, 4);
    let q = normal(r, &[3, 6]);
    let kv = normal(r, &[5, 6]);
    check("Attention", store, &|c| {
        let qv = c.constant(q.clone())?;
        let kvv = c.constant(kv.clone())?;
        att.forward(c, qv, kvv, kvv)
    }, r);

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, r, "mlp", 4, 8, 3);
    let x = normal(r, &[5, 4]);
    check("Mlp", store, &|c| {
        let xv = c.constant(x.clone())?;
        mlp.forward(c, xv)
    }, r);
    out
}

/// Replaces every parameter value with fresh normal noise. Used before
/// gradient checks so zero-initialized weights do not hide gradients of
/// the layers feeding them.
pub fn randomize(store: &mut ParamStore<f64>, r: &mut impl Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, r);
        }
    }
}

/// A small episode at the desk configuration for composed checks.
pub struct ComposedCase {
    pub model: Model<f64>,
    pub support: MultiLevelFeatures<f64>,
    pub query: MultiLevelFeatures<f64>,
    pub mask: Mask,
    pub gt: Mask,
}

pub fn composed_case(seed: u64, arch: &ArchConfig) -> ComposedCase {
    let mut r = rng(seed);
    let mut model = Model::<f64>::new(arch, seed).unwrap();
    randomize(&mut model.params, &mut r);
    let e = &arch.encoder;
    let s = e.feature_size();
    let feats = |r: &mut ChaCha8Rng| {
        let mk = |r: &mut ChaCha8Rng, c| normal(r, &[c, s, s]).map(|v| v.abs());
        MultiLevelFeatures::new([mk(r, e.c1), mk(r, e.c2), normal(r, &[e.c3, s, s])], apseg::encoder::FeatureSource::Toy)
            .unwrap()
    };
    let support = feats(&mut r);
    let query = feats(&mut r);
    let mask = Mask::from_fn(s, s, |y, x| (y as i64 - 7).pow(2) + (x as i64 - 8).pow(2) < 20);
    let gt = Mask::from_fn(4 * s, 4 * s, |y, x| y > 20 && x > 12 && y < 50);
    ComposedCase { model, support, query, mask, gt }
}

/// Gradient check of the full forward pass through the Dice loss.
pub fn composed_report(case: &ComposedCase, probes: usize, seed: u64) -> Report {
    let mut r = rng(seed);
    let store = &case.model.params;
    let all: Vec<_> = store.iter().map(|(id, p)| (id, p.value.len())).collect();
    // Probe every parameter tensor at least once, then extra random probes.
    let mut coords: Vec<_> = all.iter().map(|&(id, n)| (id, r.random_range(0..n))).collect();
    while coords.len() < probes.max(all.len()) {
        let (id, n) = all[r.random_range(0..all.len())];
        coords.push((id, r.random_range(0..n)));
    }
    gradcheck::check_params(
        store,
        |s, tape| {
            let mut ctx = Ctx::new(s);
            let inp = EpisodeInput { support: vec![&case.support], masks: vec![case.mask.clone()], query: &case.query };
            let out = case.model.forward(&mut ctx, &inp)?;
            let loss = dice_loss(&mut ctx.tape, out.logits, &case.gt)?;
            *tape = ctx.into_tape();
            Ok(loss)
        },
        &coords,
    )
    .unwrap()
}

// ------------------------------------------------------------- training

use apseg::config::RunConfig;
use apseg::episodes::sample_episode;
use apseg::experiment;
use apseg::tensor::AdamConfig;
use apseg::trainer::train_step;

/// Dice losses of `steps` Adam steps on one fixed source episode (chosen by
/// `pick`), recorded before each update.
pub fn overfit_losses(cfg: &RunConfig, steps: usize, pick: u64) -> Vec<f64> {
    let mut small = cfg.clone();
    small.data.per_class = 4;
    let enc = experiment::encoder(&small);
    let ds = experiment::train_dataset(&small, &enc).unwrap();
    let ep = sample_episode(&ds, small.data.shots, &mut rng(pick)).unwrap();
    let inp = EpisodeInput::from_episode(&ep);
    let mut model = Model::<f32>::new(&small.arch(), small.train.seed).unwrap();
    let adam = AdamConfig::with_lr(small.train.lr);
    (0..steps).map(|_| train_step(&mut model, &[(inp.clone(), ep.query.mask())], &adam).unwrap()).collect()
}

// ---------------------------------------------------------------- shapes

use apseg::mpg::MpgInputs;

/// Shapes of the sparse and dense prompt embeddings and of the logits for
/// one forward pass on random features at `arch`'s sizes.
pub fn prompt_shapes(arch: &ArchConfig, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut r = rng(seed);
    let model = Model::<f32>::new(arch, seed).unwrap();
    let e = &arch.encoder;
    let s = e.feature_size();
    let feats = |r: &mut ChaCha8Rng| {
        let mk = |r: &mut ChaCha8Rng, c| normal(r, &[c, s, s]).map(|v| v.abs()).cast::<f32>();
        MultiLevelFeatures::new([mk(r, e.c1), mk(r, e.c2), mk(r, e.c3)], apseg::encoder::FeatureSource::Imported).unwrap()
    };
    let support = feats(&mut r);
    let query = feats(&mut r);
    let masks = vec![Mask::from_fn(s, s, |y, x| y > s / 4 && x < s / 2)];
    let mut ctx = Ctx::new(&model.params);
    let bind = |ctx: &mut Ctx<f32>, f: &MultiLevelFeatures<f32>| -> [Var; 3] {
        [0, 1, 2].map(|l| ctx.constant(f.levels[l].clone()).unwrap())
    };
    let sv = bind(&mut ctx, &support);
    let qv = bind(&mut ctx, &query);
    let p = model.mpg.generate(&mut ctx, &MpgInputs { support: &[sv], query: qv, masks: &masks }).unwrap();
    let sparse = p.sparse.map(|v| ctx.value(v).shape().to_vec()).unwrap_or_default();
    let dense = ctx.value(p.dense).shape().to_vec();
    let inp = EpisodeInput { support: vec![&support], masks, query: &query };
    let logits = model.logits(&inp).unwrap().shape().to_vec();
    (sparse, dense, logits)
}

// ---------------------------------------------------------------- metrics

use apseg::episodes::{iou, run_miou, tally, Aggregation, ClassStats};
use apseg::trainer::dice_value;
use std::collections::BTreeMap;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Mask from rows of `#` (foreground) and `.`.
pub fn ascii_mask(rows: &[&str]) -> Mask {
    let h = rows.len();
    let w = rows[0].len();
    Mask::new(h, w, rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect()).unwrap()
}

pub fn iou_examples() -> Result<(), String> {
    let gt = ascii_mask(&["##..", "##..", "....", "...."]);
    let cases = [
        (gt.clone(), 1.0),
        (ascii_mask(&["....", "....", "..##", "..##"]), 0.0),
        (ascii_mask(&["##..", "....", "....", "...."]), 0.5),
        (ascii_mask(&["###.", "###.", "....", "...."]), 4.0 / 6.0),
    ];
    for (pred, want) in cases {
        let got = iou(&pred, &gt).map_err(|e| e.to_string())?;
        ensure!(got == want, "iou {got} != {want}");
        ensure!(iou(&gt, &pred).unwrap() == got, "iou not symmetric");
    }
    ensure!(iou(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap() == 1.0, "empty/empty iou must be 1");
    ensure!(iou(&gt, &Mask::empty(4, 3)).is_err(), "mismatched dims accepted");
    Ok(())
}

pub fn dice_examples() -> Result<(), String> {
    // Half overlap with hard probabilities: |p| = |g| = 100, overlap 50.
    let gt: Vec<bool> = (0..200).map(|i| i < 100).collect();
    let p: Vec<f64> = (0..200).map(|i| if (50..150).contains(&i) { 1.0 } else { 0.0 }).collect();
    let d = dice_value(&p, &gt);
    ensure!((d - (1.0 - 101.0 / 201.0)).abs() < 1e-12, "half-overlap dice {d}");
    ensure!((d - 0.4975).abs() < 1e-4, "half-overlap dice {d} vs 0.4975");

    // Saturated logits equal to the ground truth on a 32×32 mask.
    let g = Mask::from_fn(32, 32, |y, x| y < 16 && x > 3);
    let logits = Tensor::new(&[1, 32, 32], g.data().iter().map(|&b| if b { 40.0 } else { -40.0 }).collect()).unwrap();
    let loss_of = |t: Tensor<f64>| {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(t).unwrap();
        let loss = dice_loss(&mut tape, l, &g).unwrap();
        tape.value(loss).data()[0]
    };
    let same = loss_of(logits.clone());
    ensure!(same <= 1e-3, "saturated matching dice {same}");

    // Saturated prediction disjoint from the ground truth.
    let far = loss_of(logits.map(|v| -v));
    let (np, ng) = ((1024 - g.count()) as f64, g.count() as f64);
    ensure!((far - (1.0 - 1.0 / (np + ng + 1.0))).abs() < 1e-9, "disjoint dice {far}");
    Ok(())
}

/// Ten episodes over two classes with hand-computed per-class sums.
pub fn accumulation_oracle() -> Result<(), String> {
    let eps: [(usize, [&str; 2], [&str; 2]); 10] = [
        (6, ["##.", "..."], ["##.", "..."]), // I 2 U 2
        (6, ["###", "..."], ["#..", "..."]), // I 1 U 3
        (7, ["...", "..."], ["..#", "..#"]), // I 0 U 2
        (7, ["..#", "..."], ["..#", "..#"]), // I 1 U 2
        (6, ["...", "###"], ["...", ".##"]), // I 2 U 3
        (7, ["###", "###"], ["###", "###"]), // I 6 U 6
        (6, ["#..", "#.."], [".#.", ".#."]), // I 0 U 4
        (7, ["##.", "..."], ["#..", "..."]), // I 1 U 2
        (6, ["...", "..."], ["...", "..."]), // I 0 U 0
        (7, [".#.", ".#."], [".##", ".##"]), // I 2 U 4
    ];
    let mut table: BTreeMap<usize, ClassStats> = BTreeMap::new();
    for (class, pred, gt) in &eps {
        tally(&mut table, *class, &ascii_mask(pred), &ascii_mask(gt)).map_err(|e| e.to_string())?;
    }
    // class 6: I = 2+1+2+0+0 = 5, U = 2+3+3+4+0 = 12
    // class 7: I = 0+1+6+1+2 = 10, U = 2+2+6+2+4 = 16
    let c6 = &table[&6];
    let c7 = &table[&7];
    ensure!((c6.intersection, c6.union, c6.episodes) == (5, 12, 5), "class 6 sums {c6:?}");
    ensure!((c7.intersection, c7.union, c7.episodes) == (10, 16, 5), "class 7 sums {c7:?}");
    let acc = run_miou(&table, Aggregation::Accumulated);
    ensure!((acc - (5.0 / 12.0 + 10.0 / 16.0) / 2.0).abs() < 1e-15, "accumulated mIoU {acc}");
    // Episode means: class 6 (1 + 1/3 + 2/3 + 0 + 1)/5, class 7 (0 + 1/2 + 1 + 1/2 + 1/2)/5.
    let mean = run_miou(&table, Aggregation::EpisodeMean);
    let expect = ((1.0 + 1.0 / 3.0 + 2.0 / 3.0 + 0.0 + 1.0) / 5.0 + (0.0 + 0.5 + 1.0 + 0.5 + 0.5) / 5.0) / 2.0;
    ensure!((mean - expect).abs() < 1e-15, "episode-mean mIoU {mean} vs {expect}");
    Ok(())
}

// ---------------------------------------------------------------- determinism

use apseg::checkpoint::Checkpoint;
use apseg::experiment::EvalDomain;
use apseg::trainer::Trainer;

/// Same config and seed twice: equal checkpoint hashes and reports; a
/// different seed changes the hash; `split` steps, a checkpoint round trip,
/// then the rest matches an uninterrupted run bit for bit.
pub fn determinism(cfg: &RunConfig, split: u64) -> Result<(), String> {
    let e = |x: apseg::Error| x.to_string();
    let enc = experiment::encoder(cfg);
    let ds = experiment::train_dataset(cfg, &enc).map_err(e)?;
    let eval_ds = experiment::eval_dataset(cfg, &enc, EvalDomain::Target).map_err(e)?;
    let a = experiment::train(cfg, &ds, |_| {}).map_err(e)?;
    let b = experiment::train(cfg, &ds, |_| {}).map_err(e)?;
    let ha = Checkpoint::from_trainer(&a, cfg).hash();
    let hb = Checkpoint::from_trainer(&b, cfg).hash();
    ensure!(ha == hb, "checkpoint hashes differ: {ha} vs {hb}");
    let ra = experiment::eval(&a.model, cfg, &eval_ds).map_err(e)?;
    let rb = experiment::eval(&b.model, cfg, &eval_ds).map_err(e)?;
    ensure!(ra == rb, "eval reports differ");

    let mut other = cfg.clone();
    other.train.seed = cfg.train.seed.wrapping_add(1);
    let c = experiment::train(&other, &ds, |_| {}).map_err(e)?;
    ensure!(Checkpoint::from_trainer(&c, &other).hash() != ha, "seed does not affect the checkpoint");

    let model = Model::<f32>::new(&cfg.arch(), cfg.train.seed).map_err(e)?;
    let mut half = Trainer::new(model, &cfg.train, cfg.data.shots).map_err(e)?;
    for _ in 0..split {
        half.step_once(&ds).map_err(e)?;
    }
    let bytes = Checkpoint::from_trainer(&half, cfg).encode();
    let mut resumed = Checkpoint::decode(&bytes).map_err(e)?.trainer(cfg).map_err(e)?;
    ensure!(resumed.step == split, "resumed at step {}", resumed.step);
    resumed.run(&ds, |_| {}).map_err(e)?;
    let hr = Checkpoint::from_trainer(&resumed, cfg).hash();
    ensure!(hr == ha, "resumed run {hr} differs from uninterrupted {ha}");
    Ok(())
}
