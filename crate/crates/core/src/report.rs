//! Plain-text and key-value reports, ablation tables and image renders.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::episodes::{Aggregation, EvalReport, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Provenance stamped on every output.
#[derive(Clone, Debug, PartialEq)]
pub struct Stamp {
    pub config_hash: String,
    pub arch_hash: String,
    pub seed: u64,
    pub checkpoint_hash: Option<String>,
}

fn aggregation_label(a: Aggregation) -> &'static str {
    match a {
        Aggregation::Accumulated => "accumulated per-class intersection / union",
        Aggregation::EpisodeMean => "mean of per-episode IoU",
    }
}

fn agg_key(a: Aggregation) -> &'static str {
    match a {
        Aggregation::Accumulated => "accumulated",
        Aggregation::EpisodeMean => "episode-mean",
    }
}

fn class_iou(s: &crate::episodes::ClassStats, agg: Aggregation) -> f64 {
    match agg {
        Aggregation::Accumulated if s.union == 0 => 1.0,
        Aggregation::Accumulated => s.intersection as f64 / s.union as f64,
        Aggregation::EpisodeMean => s.iou_sum / s.episodes.max(1) as f64,
    }
}

pub fn eval_text(r: &EvalReport, stamp: &Stamp, domain: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "evaluation report");
    let _ = writeln!(s, "config hash: {}", stamp.config_hash);
    let _ = writeln!(s, "arch hash:   {}", stamp.arch_hash);
    let _ = writeln!(s, "seed:        {}", stamp.seed);
    if let Some(h) = &stamp.checkpoint_hash {
        let _ = writeln!(s, "checkpoint:  {h}");
    }
    let _ = writeln!(s, "domain:      {domain}");
    let _ = writeln!(s, "mIoU:        {}", aggregation_label(r.aggregation));
    let _ = writeln!(s, "episodes/run {}\n", r.episodes_per_run);
    let classes: Vec<usize> = r.runs.first().map(|x| x.classes.keys().copied().collect()).unwrap_or_default();
    let _ = write!(s, "{:>4}  {:>20}  {:>7}", "run", "seed", "mIoU");
    for c in &classes {
        let _ = write!(s, "  {:>9}", CLASS_NAMES.get(*c).copied().unwrap_or("?"));
    }
    s.push('\n');
    for (i, run) in r.runs.iter().enumerate() {
        let _ = write!(s, "{i:>4}  {:>20}  {:>7.2}", run.seed, 100.0 * run.miou);
        for c in &classes {
            let v = run.classes.get(c).map(|st| 100.0 * class_iou(st, r.aggregation)).unwrap_or(f64::NAN);
            let _ = write!(s, "  {v:>9.2}");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "\nmean mIoU {:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.std);
    s
}

pub fn eval_kv(r: &EvalReport, stamp: &Stamp, domain: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config_hash={}", stamp.config_hash);
    let _ = writeln!(s, "arch_hash={}", stamp.arch_hash);
    let _ = writeln!(s, "seed={}", stamp.seed);
    if let Some(h) = &stamp.checkpoint_hash {
        let _ = writeln!(s, "checkpoint_hash={h}");
    }
    let _ = writeln!(s, "domain={domain}");
    let _ = writeln!(s, "aggregation={}", agg_key(r.aggregation));
    let _ = writeln!(s, "runs={}", r.runs.len());
    let _ = writeln!(s, "episodes_per_run={}", r.episodes_per_run);
    for (i, run) in r.runs.iter().enumerate() {
        let _ = writeln!(s, "run.{i}.seed={}", run.seed);
        let _ = writeln!(s, "run.{i}.miou={:.6}", run.miou);
        for (c, st) in &run.classes {
            let _ = writeln!(s, "run.{i}.class.{c}.episodes={}", st.episodes);
            let _ = writeln!(s, "run.{i}.class.{c}.intersection={}", st.intersection);
            let _ = writeln!(s, "run.{i}.class.{c}.union={}", st.union);
            let _ = writeln!(s, "run.{i}.class.{c}.iou={:.6}", class_iou(st, r.aggregation));
        }
    }
    let _ = writeln!(s, "mean={:.6}", r.mean);
    let _ = writeln!(s, "std={:.6}", r.std);
    s
}

/// Parses `key=value` lines, skipping blanks.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("not a key=value line: {l:?}")))
        })
        .collect()
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub params: usize,
    pub train_seed: u64,
    pub eval_seeds: Vec<u64>,
    pub runs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn text(&self, stamp: &Stamp) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ablation: {}", self.axis);
        let _ = writeln!(s, "config hash: {}", stamp.config_hash);
        let _ = writeln!(s, "seed:        {}\n", stamp.seed);
        let runs = self.rows.first().map_or(0, |r| r.runs.len());
        let _ = write!(s, "{:<22}  {:>9}", "variant", "params");
        for i in 0..runs {
            let _ = write!(s, "  {:>7}", format!("run{i}"));
        }
        let _ = writeln!(s, "  {:>7}  {:>6}", "mIoU", "std");
        for r in &self.rows {
            let _ = write!(s, "{:<22}  {:>9}", r.label, r.params);
            for v in &r.runs {
                let _ = write!(s, "  {:>7.2}", 100.0 * v);
            }
            let _ = writeln!(s, "  {:>7.2}  {:>6.2}", 100.0 * r.mean, 100.0 * r.std);
        }
        s
    }

    pub fn kv(&self, stamp: &Stamp) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "axis={}", self.axis);
        let _ = writeln!(s, "config_hash={}", stamp.config_hash);
        let _ = writeln!(s, "seed={}", stamp.seed);
        let _ = writeln!(s, "rows={}", self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(s, "row.{i}.label={}", r.label);
            let _ = writeln!(s, "row.{i}.params={}", r.params);
            let _ = writeln!(s, "row.{i}.train_seed={}", r.train_seed);
            let seeds: Vec<String> = r.eval_seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "row.{i}.eval_seeds={}", seeds.join(","));
            for (j, v) in r.runs.iter().enumerate() {
                let _ = writeln!(s, "row.{i}.run.{j}={v:.6}");
            }
            let _ = writeln!(s, "row.{i}.mean={:.6}", r.mean);
            let _ = writeln!(s, "row.{i}.std={:.6}", r.std);
        }
        s
    }
}

/// Binary PGM (P5) of a mask, foreground white.
pub fn mask_pgm(m: &Mask) -> Vec<u8> {
    let (h, w) = m.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Binary PPM (P6) of a `3×H×W` image in `[0,1]`, with the optional
/// prediction tinted red and the ground-truth outline green.
pub fn overlay_ppm(image: &Tensor<f32>, pred: Option<&Mask>, gt: Option<&Mask>) -> Result<Vec<u8>> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::Dimension(format!("render expects 3×H×W, got {:?}", image.shape())));
    };
    for m in [pred, gt].into_iter().flatten() {
        if m.dims() != (h, w) {
            return Err(Error::Dimension(format!("mask {:?} vs image {h}×{w}", m.dims())));
        }
    }
    let d = image.data();
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut px = [d[i], d[n + i], d[2 * n + i]];
            if pred.is_some_and(|m| m.get(y, x)) {
                px = [0.5 * px[0] + 0.5, 0.5 * px[1], 0.5 * px[2]];
            }
            if let Some(g) = gt {
                let edge = g.get(y, x)
                    && [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 || !g.get(yy as usize, xx as usize)
                    });
                if edge {
                    px = [0.0, 1.0, 0.0];
                }
            }
            out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    Ok(out)
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{ClassStats, RunReport};
    use std::collections::BTreeMap;

    fn report() -> EvalReport {
        let mut classes = BTreeMap::new();
        classes.insert(6, ClassStats { intersection: 3, union: 4, iou_sum: 0.75, episodes: 1 });
        classes.insert(7, ClassStats { intersection: 1, union: 4, iou_sum: 0.25, episodes: 1 });
        let run = RunReport { seed: 42, miou: 0.5, classes };
        EvalReport { aggregation: Aggregation::Accumulated, episodes_per_run: 2, runs: vec![run], mean: 0.5, std: 0.0 }
    }

    fn stamp() -> Stamp {
        Stamp { config_hash: "abc".into(), arch_hash: "def".into(), seed: 1, checkpoint_hash: None }
    }

    #[test]
    fn kv_has_hash_and_class_rows() {
        let kv = parse_kv(&eval_kv(&report(), &stamp(), "target")).unwrap();
        let get = |k: &str| kv.iter().find(|(a, _)| a == k).map(|(_, v)| v.as_str());
        assert_eq!(get("config_hash"), Some("abc"));
        assert_eq!(get("run.0.class.6.iou"), Some("0.750000"));
        assert_eq!(get("mean"), Some("0.500000"));
    }

    #[test]
    fn text_lists_class_names() {
        let t = eval_text(&report(), &stamp(), "target");
        assert!(t.contains("ellipse") && t.contains("l-shape"), "{t}");
        assert!(t.contains("mean mIoU 50.00"));
    }

    #[test]
    fn pgm_header_and_size() {
        let m = Mask::from_fn(2, 3, |y, x| y == x);
        let b = mask_pgm(&m);
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(b.len(), 11 + 6);
        assert_eq!(&b[11..], &[255, 0, 0, 0, 255, 0]);
    }

    #[test]
    fn ppm_rejects_mismatched_mask() {
        let img = Tensor::<f32>::zeros(&[3, 4, 4]);
        assert!(overlay_ppm(&img, Some(&Mask::empty(4, 4)), None).is_ok());
        assert!(overlay_ppm(&img, Some(&Mask::empty(3, 4)), None).is_err());
    }
}
