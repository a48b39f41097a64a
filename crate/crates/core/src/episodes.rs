//! Synthetic cross-domain shape benchmark, episode sampling and mIoU
//! evaluation.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{FrozenEncoder, ImageSample, MultiLevelFeatures};
use crate::error::{dim_err, Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;
use crate::util;

pub const CLASS_NAMES: [&str; 8] = ["circle", "triangle", "square", "cross", "ring", "star", "ellipse", "l-shape"];

/// Foreground fraction bounds enforced by the generator.
pub const MIN_FG_FRACTION: f64 = 0.05;
pub const MAX_FG_FRACTION: f64 = 0.6;

/// Appearance of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub id: usize,
    /// Invert all intensities.
    pub inversion: bool,
    /// Standard deviation of additive Gaussian pixel noise, `[0, 0.5]`.
    pub noise: f64,
    /// Spatial frequency (cycles per pixel) of the multiplicative stripe
    /// texture, `[0, 0.5]`; 0 disables it.
    pub texture_freq: f64,
    /// Box-blur radius in pixels, `[0, 4]`.
    pub blur: usize,
    /// Seed for background and class colors.
    pub palette_seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self::source()
    }
}

impl DomainSpec {
    pub fn source() -> Self {
        Self { id: 0, inversion: false, noise: 0.03, texture_freq: 0.0, blur: 0, palette_seed: 11 }
    }

    pub fn target() -> Self {
        Self { id: 1, inversion: true, noise: 0.08, texture_freq: 0.18, blur: 1, palette_seed: 907 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.noise) || !(0.0..=0.5).contains(&self.texture_freq) || self.blur > 4 {
            return Err(Error::Config(format!("domain parameters out of range: {self:?}")));
        }
        Ok(())
    }

    /// Background color and one color per class.
    pub fn palette(&self) -> ([f32; 3], [[f32; 3]; 8]) {
        let mut rng = ChaCha8Rng::seed_from_u64(util::mix_seed(self.palette_seed, 0x9A1E));
        let bg_hue: f64 = rng.random();
        let bg = hsv(bg_hue, 0.35, 0.25 + 0.15 * rng.random::<f64>());
        let offset: f64 = rng.random();
        let mut classes = [[0.0; 3]; 8];
        for (i, c) in classes.iter_mut().enumerate() {
            // Spread hues evenly, shuffled by the seed, keeping clear of the background hue.
            let h = (offset + (i as f64 + 0.5) / 8.0 * 0.8 + 0.1 + bg_hue).fract();
            *c = hsv(h, 0.55 + 0.4 * rng.random::<f64>(), 0.7 + 0.3 * rng.random::<f64>());
        }
        (bg, classes)
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

fn point_in_polygon(u: f64, v: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn regular(n: usize, inner: Option<f64>) -> Vec<(f64, f64)> {
    let steps = if inner.is_some() { 2 * n } else { n };
    (0..steps)
        .map(|i| {
            let a = std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::TAU / steps as f64;
            let r = if i % 2 == 1 { inner.unwrap_or(1.0) } else { 1.0 };
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Membership of the unit-scale shape `class` at local coordinates `(u, v)`.
pub fn shape_contains(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => point_in_polygon(u, v, &regular(3, None)),
        2 => u.abs() <= 0.75 && v.abs() <= 0.75,
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => (0.3..=1.0).contains(&r2),
        5 => point_in_polygon(u, v, &regular(5, Some(0.45))),
        6 => u * u + (v / 0.55) * (v / 0.55) <= 1.0,
        7 => ((-0.8..=-0.2).contains(&u) && (-0.9..=0.9).contains(&v)) || ((-0.8..=0.8).contains(&u) && (0.3..=0.9).contains(&v)),
        _ => false,
    }
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    cx: f64,
    cy: f64,
    r: f64,
    theta: f64,
}

impl Placement {
    fn random<R: Rng>(rng: &mut R, size: usize, rmin: f64, rmax: f64) -> Self {
        let r = rng.random_range(rmin..rmax);
        let margin = 0.6 * r;
        let s = size as f64;
        Self {
            cx: rng.random_range(margin..(s - margin).max(margin + 1e-6)),
            cy: rng.random_range(margin..(s - margin).max(margin + 1e-6)),
            r,
            theta: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn raster(&self, class: usize, size: usize) -> Mask {
        let (s, c) = self.theta.sin_cos();
        Mask::from_fn(size, size, |y, x| {
            let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
            let u = (c * dx + s * dy) / self.r;
            let v = (-s * dx + c * dy) / self.r;
            shape_contains(class, u, v)
        })
    }
}

/// Renders one image of `class` with an optional distractor of class
/// `distractor`. Returns pixels (`3×size×size`) and the exact target mask.
pub fn render<R: Rng>(
    rng: &mut R,
    spec: &DomainSpec,
    class: usize,
    distractor: Option<usize>,
    size: usize,
) -> (Tensor<f32>, Mask) {
    let (bg, colors) = spec.palette();
    let scale = size as f64 / 64.0;
    let mask = loop {
        let m = Placement::random(rng, size, 10.0 * scale, 24.0 * scale).raster(class, size);
        if (MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&m.fraction()) {
            break m;
        }
    };
    let other = distractor.map(|d| (d, Placement::random(rng, size, 7.0 * scale, 14.0 * scale).raster(d, size)));
    let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (sa, ca) = angle.sin_cos();
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite");
    let n = size * size;
    let mut px = vec![0.0f32; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let mut col = bg;
            if let Some((d, m)) = &other {
                if m.data()[i] {
                    col = colors[*d];
                }
            }
            if mask.data()[i] {
                col = std::array::from_fn(|ch| colors[class][ch] + jitter[ch]);
            }
            let tex = if spec.texture_freq > 0.0 {
                let t = (x as f64 * ca + y as f64 * sa) * spec.texture_freq * std::f64::consts::TAU + phase;
                0.7 + 0.3 * t.sin()
            } else {
                1.0
            };
            for ch in 0..3 {
                px[ch * n + i] = col[ch] * tex as f32;
            }
        }
    }
    let mut px = box_blur(&px, size, spec.blur);
    for v in px.iter_mut() {
        if spec.noise > 0.0 {
            *v += noise.sample(rng) as f32;
        }
        *v = v.clamp(0.0, 1.0);
        if spec.inversion {
            *v = 1.0 - *v;
        }
    }
    (Tensor::new(&[3, size, size], px).expect("3×size×size"), mask)
}

fn box_blur(px: &[f32], size: usize, r: usize) -> Vec<f32> {
    if r == 0 {
        return px.to_vec();
    }
    let n = size * size;
    let mut out = vec![0.0; px.len()];
    for ch in 0..px.len() / n {
        let src = &px[ch * n..(ch + 1) * n];
        for y in 0..size {
            for x in 0..size {
                let (y0, y1) = (y.saturating_sub(r), (y + r).min(size - 1));
                let (x0, x1) = (x.saturating_sub(r), (x + r).min(size - 1));
                let mut s = 0.0;
                for yy in y0..=y1 {
                    s += src[yy * size + x0..=yy * size + x1].iter().sum::<f32>();
                }
                out[ch * n + y * size + x] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f32;
            }
        }
    }
    out
}

/// A rendered image with its cached frozen features.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: ImageSample,
    pub features: MultiLevelFeatures<f32>,
    /// Ground truth at feature resolution.
    pub feature_mask: Mask,
}

impl Sample {
    pub fn mask(&self) -> &Mask {
        self.image.mask.as_ref().expect("generated samples carry masks")
    }
}

/// Samples grouped by class, all from one domain.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub domain: DomainSpec,
    pub classes: Vec<usize>,
    pub samples: BTreeMap<usize, Vec<Sample>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub shots: usize,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
    pub per_class: usize,
    /// Probability of adding a shape of another class.
    pub distractor_prob: f64,
    pub source: DomainSpec,
    pub target: DomainSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            shots: 1,
            train_classes: (0..6).collect(),
            test_classes: vec![6, 7],
            per_class: 48,
            distractor_prob: 0.5,
            source: DomainSpec::source(),
            target: DomainSpec::target(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.train_classes.iter().find(|c| self.test_classes.contains(c)) {
            return Err(Error::Contract(format!("class {c} is in both the train and test split")));
        }
        if let Some(c) = self.train_classes.iter().chain(&self.test_classes).find(|&&c| c >= CLASS_NAMES.len()) {
            return Err(Error::Config(format!("class id {c} out of range 0..8")));
        }
        if self.shots != 1 && self.shots != 5 {
            return Err(Error::Config(format!("shots must be 1 or 5, got {}", self.shots)));
        }
        if self.per_class < self.shots + 1 {
            return Err(Error::Config(format!("per_class {} < shots + 1", self.per_class)));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Config("distractor_prob must be in [0, 1]".into()));
        }
        self.source.validate()?;
        self.target.validate()
    }
}

/// Renders `count` samples for each class and extracts their features.
pub fn generate_dataset(
    spec: &DomainSpec,
    classes: &[usize],
    count: usize,
    distractor_prob: f64,
    seed: u64,
    encoder: &FrozenEncoder,
) -> Result<Dataset> {
    let size = encoder.config().image_size;
    let fs = encoder.config().feature_size();
    let mut samples = BTreeMap::new();
    for &class in classes {
        if class >= CLASS_NAMES.len() {
            return Err(Error::Config(format!("class id {class} out of range")));
        }
        let stream = util::mix_seed(seed, (spec.id as u64) << 32 | class as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let others: Vec<usize> = classes.iter().copied().filter(|&c| c != class).collect();
        let mut list = Vec::with_capacity(count);
        for _ in 0..count {
            let distractor = (!others.is_empty() && rng.random_bool(distractor_prob))
                .then(|| others[rng.random_range(0..others.len())]);
            let (pixels, mask) = render(&mut rng, spec, class, distractor, size);
            let image = ImageSample { pixels, mask: Some(mask.clone()), class_id: class, domain_id: spec.id };
            let features = encoder.extract(&image)?;
            list.push(Sample { image, features, feature_mask: mask.resize_nearest(fs, fs) });
        }
        samples.insert(class, list);
    }
    Ok(Dataset { domain: spec.clone(), classes: classes.to_vec(), samples })
}

/// Asserts that two splits share no class.
pub fn check_disjoint(train: &[usize], test: &[usize]) -> Result<()> {
    match train.iter().find(|c| test.contains(c)) {
        Some(c) => Err(Error::Contract(format!("class {c} appears in both splits"))),
        None => Ok(()),
    }
}

/// One K-shot task.
#[derive(Clone, Debug)]
pub struct Episode<'a> {
    pub support: Vec<&'a Sample>,
    pub query: &'a Sample,
    pub class_id: usize,
    pub domain_id: usize,
    /// Dataset indices of the supports followed by the query.
    pub indices: Vec<usize>,
}

/// Draws a class uniformly, then `shots + 1` distinct samples of it.
pub fn sample_episode<'a, R: Rng>(ds: &'a Dataset, shots: usize, rng: &mut R) -> Result<Episode<'a>> {
    if ds.classes.is_empty() {
        return Err(Error::Sampling("dataset has no classes".into()));
    }
    let class = ds.classes[rng.random_range(0..ds.classes.len())];
    let pool = &ds.samples[&class];
    if pool.len() < shots + 1 {
        return Err(Error::Sampling(format!(
            "class {class} has {} samples, episode needs {}",
            pool.len(),
            shots + 1
        )));
    }
    let idx = index::sample(rng, pool.len(), shots + 1).into_vec();
    Ok(Episode {
        support: idx[..shots].iter().map(|&i| &pool[i]).collect(),
        query: &pool[idx[shots]],
        class_id: class,
        domain_id: ds.domain.id,
        indices: idx,
    })
}

/// `|a∩b| / |a∪b|`, 1 when both are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return dim_err(format!("iou of {:?} and {:?}", pred.dims(), gt.dims()));
    }
    let u = pred.union(gt);
    Ok(if u == 0 { 1.0 } else { pred.intersection(gt) as f64 / u as f64 })
}

/// Anything that segments the query of an episode.
pub trait Segmenter {
    /// Binary prediction at the query's ground-truth resolution.
    fn predict(&self, ep: &Episode) -> Result<Mask>;
}

/// Returns the query ground truth.
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn predict(&self, ep: &Episode) -> Result<Mask> {
        Ok(ep.query.mask().clone())
    }
}

/// Predicts background everywhere.
pub struct BackgroundSegmenter;

impl Segmenter for BackgroundSegmenter {
    fn predict(&self, ep: &Episode) -> Result<Mask> {
        let (h, w) = ep.query.mask().dims();
        Ok(Mask::empty(h, w))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Sum intersections and unions per class, then divide.
    #[default]
    Accumulated,
    /// Average per-episode IoU per class.
    EpisodeMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub runs: usize,
    pub episodes: usize,
    pub seed: u64,
    pub aggregation: Aggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { runs: 5, episodes: 200, seed: 7, aggregation: Aggregation::Accumulated }
    }
}

/// Per-class sums of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassStats {
    pub intersection: u64,
    pub union: u64,
    pub iou_sum: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub seed: u64,
    pub miou: f64,
    pub classes: BTreeMap<usize, ClassStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub aggregation: Aggregation,
    pub episodes_per_run: usize,
    pub runs: Vec<RunReport>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    pub fn seeds(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.seed).collect()
    }
}

pub fn run_seed(base: u64, run: usize) -> u64 {
    util::mix_seed(base, 0xE7A1_0000 + run as u64)
}

/// mIoU of one run from its per-class table.
pub fn run_miou(classes: &BTreeMap<usize, ClassStats>, agg: Aggregation) -> f64 {
    if classes.is_empty() {
        return 0.0;
    }
    let per: Vec<f64> = classes
        .values()
        .map(|s| match agg {
            Aggregation::Accumulated if s.union == 0 => 1.0,
            Aggregation::Accumulated => s.intersection as f64 / s.union as f64,
            Aggregation::EpisodeMean => s.iou_sum / s.episodes.max(1) as f64,
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// Adds one episode's prediction to the per-class table.
pub fn tally(classes: &mut BTreeMap<usize, ClassStats>, class: usize, pred: &Mask, gt: &Mask) -> Result<()> {
    let v = iou(pred, gt)?;
    let st = classes.entry(class).or_default();
    st.intersection += pred.intersection(gt) as u64;
    st.union += pred.union(gt) as u64;
    st.iou_sum += v;
    st.episodes += 1;
    Ok(())
}

/// Runs `cfg.runs` independent runs of `cfg.episodes` episodes each.
/// `observe` sees every episode with its prediction (for renders).
pub fn evaluate<S: Segmenter + ?Sized>(
    model: &S,
    ds: &Dataset,
    shots: usize,
    cfg: &EvalConfig,
    mut observe: impl FnMut(usize, usize, &Episode, &Mask),
) -> Result<EvalReport> {
    let mut runs = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs {
        let seed = run_seed(cfg.seed, r);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut classes: BTreeMap<usize, ClassStats> = BTreeMap::new();
        for e in 0..cfg.episodes {
            let ep = sample_episode(ds, shots, &mut rng)?;
            let pred = model.predict(&ep)?;
            tally(&mut classes, ep.class_id, &pred, ep.query.mask())?;
            observe(r, e, &ep, &pred);
        }
        runs.push(RunReport { seed, miou: run_miou(&classes, cfg.aggregation), classes });
    }
    let n = runs.len().max(1) as f64;
    let mean = runs.iter().map(|r| r.miou).sum::<f64>() / n;
    let std = (runs.iter().map(|r| (r.miou - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalReport { aggregation: cfg.aggregation, episodes_per_run: cfg.episodes, runs, mean, std })
}
