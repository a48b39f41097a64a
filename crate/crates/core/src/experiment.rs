//! Dataset assembly, training runs and ablation sweeps driven by a
//! [`RunConfig`].

use std::fmt;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::dpat::PseudoMode;
use crate::encoder::FrozenEncoder;
use crate::episodes::{check_disjoint, evaluate, generate_dataset, Dataset, EvalReport};
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::report::{AblationRow, AblationTable};
use crate::trainer::{StepLog, Trainer};

/// Which split an evaluation draws episodes from. Both use the held-out
/// classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalDomain {
    /// Shifted domain.
    #[default]
    Target,
    /// Training domain, held-out classes.
    Source,
}

impl EvalDomain {
    pub fn label(self) -> &'static str {
        match self {
            Self::Target => "target",
            Self::Source => "source",
        }
    }
}

impl FromStr for EvalDomain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Self::Target),
            "source" => Ok(Self::Source),
            _ => Err(Error::Config(format!("unknown domain {s:?} (expected target or source)"))),
        }
    }
}

pub fn encoder(cfg: &RunConfig) -> FrozenEncoder {
    FrozenEncoder::new(&cfg.encoder)
}

/// Source-domain training classes.
pub fn train_dataset(cfg: &RunConfig, enc: &FrozenEncoder) -> Result<Dataset> {
    let d = &cfg.data;
    check_disjoint(&d.train_classes, &d.test_classes)?;
    generate_dataset(&d.source, &d.train_classes, d.per_class, d.distractor_prob, d.seed, enc)
}

/// Held-out classes in the requested domain.
pub fn eval_dataset(cfg: &RunConfig, enc: &FrozenEncoder, domain: EvalDomain) -> Result<Dataset> {
    let d = &cfg.data;
    check_disjoint(&d.train_classes, &d.test_classes)?;
    let spec = match domain {
        EvalDomain::Target => &d.target,
        EvalDomain::Source => &d.source,
    };
    generate_dataset(spec, &d.test_classes, d.per_class, d.distractor_prob, d.seed, enc)
}

/// Builds a fresh model and trains it for `cfg.train.steps` steps.
pub fn train(cfg: &RunConfig, ds: &Dataset, on_step: impl FnMut(StepLog)) -> Result<Trainer> {
    cfg.validate()?;
    let model = Model::<f32>::new(&cfg.arch(), cfg.train.seed)?;
    let mut tr = Trainer::new(model, &cfg.train, cfg.data.shots)?;
    tr.run(ds, on_step)?;
    Ok(tr)
}

pub fn eval(model: &Model<f32>, cfg: &RunConfig, ds: &Dataset) -> Result<EvalReport> {
    evaluate(model, ds, cfg.data.shots, &cfg.eval, |_, _, _, _| {})
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Baseline, +MPG, +MPG+DPAT.
    Components,
    /// Reduced channel width `c_r`.
    Channels,
    /// Number of sparse prompt embeddings.
    SparseCount,
    /// Source of the query pseudo prototypes.
    CcsMode,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Self::Components, Self::Channels, Self::SparseCount, Self::CcsMode];

    pub fn label(self) -> &'static str {
        match self {
            Self::Components => "components",
            Self::Channels => "channels",
            Self::SparseCount => "sparse-count",
            Self::CcsMode => "ccs-mode",
        }
    }

    /// The configurations compared along this axis, derived from `base`.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let full = base.clone().with_variant(Variant::Full);
        match self {
            Self::Components => [Variant::Baseline, Variant::NoDpat, Variant::Full]
                .into_iter()
                .map(|v| (v.label().to_string(), base.clone().with_variant(v)))
                .collect(),
            Self::Channels => [16, 32, 64]
                .into_iter()
                .map(|c| {
                    let mut c2 = full.clone();
                    c2.mpg.c_r = c;
                    (format!("c_r={c}"), c2)
                })
                .collect(),
            Self::SparseCount => [1, 4, 8]
                .into_iter()
                .map(|k| {
                    let mut c2 = full.clone();
                    c2.mpg.k = k;
                    (format!("k={k}"), c2)
                })
                .collect(),
            Self::CcsMode => [(PseudoMode::None, "w/o ccs"), (PseudoMode::Ccs, "w/ ccs"), (PseudoMode::PmMap, "w/ pm-map")]
                .into_iter()
                .map(|(m, label)| {
                    let mut c2 = full.clone();
                    c2.dpat.pseudo = m;
                    (label.to_string(), c2)
                })
                .collect(),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

/// Trains and evaluates every variant of `axis` with the seeds of `base`.
/// `progress` receives each finished row.
pub fn ablate(
    base: &RunConfig,
    axis: Axis,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (label, cfg) in axis.variants(base) {
        let tr = train(&cfg, train_ds, |_| {})?;
        let r = eval(&tr.model, &cfg, eval_ds)?;
        let row = AblationRow {
            label,
            params: tr.model.param_count(),
            train_seed: cfg.train.seed,
            eval_seeds: r.seeds(),
            runs: r.runs.iter().map(|x| x.miou).collect(),
            mean: r.mean,
            std: r.std,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(AblationTable { axis: axis.label().to_string(), rows })
}
