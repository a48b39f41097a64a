//! `apseg` command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid configuration,
//! 3 non-finite training state, 4 checkpoint/config hash mismatch,
//! 5 malformed input file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apseg::checkpoint::{self, Checkpoint};
use apseg::config::RunConfig;
use apseg::episodes::{evaluate, Aggregation, OracleSegmenter, Segmenter};
use apseg::experiment::{self, Axis, EvalDomain};
use apseg::features;
use apseg::report::{self, Stamp};
use apseg::trainer::{diagnostic_dump, Trainer};
use apseg::{util, Error};
use clap::{Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "apseg", version, about = "Cross-domain few-shot segmentation with auto-generated prompts")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the source domain and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on held-out classes.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Must describe the checkpoint's architecture; defaults to the
        /// configuration stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Predict the ground truth instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value = "target")]
        domain: String,
        /// Per-class accumulation or per-episode mean.
        #[arg(long)]
        aggregation: Option<String>,
        /// Write renders for this many episodes of the first run.
        #[arg(long, default_value_t = 0)]
        render: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate variants along one ablation axis.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// components, channels, sparse-count, ccs-mode or all.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value = "target")]
        domain: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a feature file (.apfe) or checkpoint (.apck).
    Inspect { path: PathBuf },
    /// Print a complete configuration file with every default.
    Config {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Render toy images and write their features as .apfe files.
    Features {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        per_class: usize,
        #[arg(long, default_value = "source")]
        domain: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::NonFinite(_) => 3,
        Error::HashMismatch(_) => 4,
        Error::Format(_) => 5,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> apseg::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::desk()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Cmd) -> apseg::Result<()> {
    match cmd {
        Cmd::Train { config, seed, steps, resume, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.validate()?;
            train(&cfg, resume.as_deref(), &out)
        }
        Cmd::Eval { checkpoint, config, oracle, runs, episodes, domain, aggregation, render, out } => {
            let domain: EvalDomain = domain.parse()?;
            let (mut cfg, ck) = match &checkpoint {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    let cfg = match &config {
                        Some(c) => RunConfig::load(c)?,
                        None => ck.run_config()?,
                    };
                    (cfg, Some(ck))
                }
                None => (load_config(config.as_deref())?, None),
            };
            if let Some(r) = runs {
                cfg.eval.runs = r;
            }
            if let Some(e) = episodes {
                cfg.eval.episodes = e;
            }
            if let Some(a) = aggregation {
                cfg.eval.aggregation = match a.as_str() {
                    "accumulated" => Aggregation::Accumulated,
                    "episode-mean" => Aggregation::EpisodeMean,
                    _ => return Err(Error::Config(format!("unknown aggregation {a:?}"))),
                };
            }
            cfg.validate()?;
            debug_assert!(oracle == ck.is_none());
            eval(&cfg, ck.as_ref(), domain, render, &out)
        }
        Cmd::Ablate { config, axis, steps, runs, episodes, domain, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(r) = runs {
                cfg.eval.runs = r;
            }
            if let Some(e) = episodes {
                cfg.eval.episodes = e;
            }
            cfg.validate()?;
            let axes = if axis == "all" { Axis::ALL.to_vec() } else { vec![axis.parse()?] };
            ablate(&cfg, &axes, domain.parse()?, &out)
        }
        Cmd::Inspect { path } => inspect(&path),
        Cmd::Config { preset } => {
            print!("{}", RunConfig::preset(&preset)?.to_toml());
            Ok(())
        }
        Cmd::Features { config, per_class, domain, out } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.data.per_class = per_class;
            let enc = experiment::encoder(&cfg);
            let ds = match domain.parse::<EvalDomain>()? {
                EvalDomain::Source => experiment::train_dataset(&cfg, &enc)?,
                EvalDomain::Target => experiment::eval_dataset(&cfg, &enc, EvalDomain::Target)?,
            };
            std::fs::create_dir_all(&out)?;
            for (class, list) in &ds.samples {
                for (i, s) in list.iter().enumerate() {
                    let id = format!("{}-c{class}-{i}", ds.domain.id);
                    let path = out.join(format!("{id}.{}", features::EXTENSION));
                    features::save_features(&path, &id, &s.features)?;
                    println!("{}", path.display());
                }
            }
            Ok(())
        }
    }
}

fn stamp(cfg: &RunConfig, checkpoint_hash: Option<String>) -> Stamp {
    Stamp { config_hash: cfg.full_hash(), arch_hash: cfg.arch_hash(), seed: cfg.train.seed, checkpoint_hash }
}

fn train(cfg: &RunConfig, resume: Option<&Path>, out: &Path) -> apseg::Result<()> {
    std::fs::create_dir_all(out)?;
    let enc = experiment::encoder(cfg);
    let ds = experiment::train_dataset(cfg, &enc)?;
    let mut tr = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let tr = ck.trainer(cfg)?;
            info!("resuming from step {}", tr.step);
            tr
        }
        None => Trainer::new(apseg::model::Model::new(&cfg.arch(), cfg.train.seed)?, &cfg.train, cfg.data.shots)?,
    };
    info!(
        "training {} ({} parameters) for {} steps, config {}",
        cfg.arch().variant().label(),
        tr.model.param_count(),
        cfg.train.steps,
        &cfg.full_hash()[..12]
    );
    let mut log = format!("# config_hash={} seed={}\nstep\tloss\n", cfg.full_hash(), cfg.train.seed);
    let every = cfg.train.log_every.max(1);
    let mut window = 0.0;
    let mut n = 0u64;
    let res = tr.run(&ds, |l| {
        let _ = writeln!(log, "{}\t{:.6}", l.step, l.loss);
        window += l.loss;
        n += 1;
        if l.step % every == 0 {
            info!("step {:>6}  loss {:.4}", l.step, window / n as f64);
            window = 0.0;
            n = 0;
        }
    });
    report::write_file(&out.join("train.log"), log.as_bytes())?;
    if let Err(e) = res {
        if let Error::NonFinite(m) = &e {
            let dump = diagnostic_dump(&tr.model, tr.step, m);
            report::write_file(&out.join("nonfinite_dump.txt"), dump.as_bytes())?;
        }
        return Err(e);
    }
    report::write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let path = out.join(format!("model.{}", checkpoint::EXTENSION));
    let hash = Checkpoint::from_trainer(&tr, cfg).save(&path)?;
    println!("checkpoint {} sha256 {hash}", path.display());
    Ok(())
}

fn eval(cfg: &RunConfig, ck: Option<&Checkpoint>, domain: EvalDomain, render: usize, out: &Path) -> apseg::Result<()> {
    let enc = experiment::encoder(cfg);
    let ds = experiment::eval_dataset(cfg, &enc, domain)?;
    let model = ck.map(|c| c.model(cfg)).transpose()?;
    let seg: &dyn Segmenter = match &model {
        Some(m) => m,
        None => &OracleSegmenter,
    };
    let renders = out.join("renders");
    let mut render_err = None;
    let r = evaluate(seg, &ds, cfg.data.shots, &cfg.eval, |run, e, ep, pred| {
        if run != 0 || e >= render || render_err.is_some() {
            return;
        }
        let base = renders.join(format!("ep{e:04}"));
        let res = report::overlay_ppm(&ep.query.image.pixels, Some(pred), Some(ep.query.mask()))
            .and_then(|b| report::write_file(&base.with_extension("ppm"), &b))
            .and_then(|_| report::write_file(&base.with_extension("pgm"), &report::mask_pgm(pred)));
        if let Err(e) = res {
            render_err = Some(e);
        }
    })?;
    if let Some(e) = render_err {
        return Err(e);
    }
    let st = stamp(cfg, ck.map(|c| c.hash()));
    let label = match ck {
        Some(_) => domain.label().to_string(),
        None => format!("{} (oracle)", domain.label()),
    };
    let text = report::eval_text(&r, &st, &label);
    report::write_file(&out.join("report.txt"), text.as_bytes())?;
    report::write_file(&out.join("report.kv"), report::eval_kv(&r, &st, &label).as_bytes())?;
    print!("{text}");
    Ok(())
}

fn ablate(cfg: &RunConfig, axes: &[Axis], domain: EvalDomain, out: &Path) -> apseg::Result<()> {
    let enc = experiment::encoder(cfg);
    let train_ds = experiment::train_dataset(cfg, &enc)?;
    let eval_ds = experiment::eval_dataset(cfg, &enc, domain)?;
    let st = stamp(cfg, None);
    for &axis in axes {
        info!("ablation axis {axis}");
        let table = experiment::ablate(cfg, axis, &train_ds, &eval_ds, |row| {
            info!("  {:<22} mIoU {:.2}", row.label, 100.0 * row.mean);
        })?;
        let text = table.text(&st);
        report::write_file(&out.join(format!("ablation_{axis}.txt")), text.as_bytes())?;
        report::write_file(&out.join(format!("ablation_{axis}.kv")), table.kv(&st).as_bytes())?;
        println!("{text}");
    }
    Ok(())
}

fn inspect(path: &Path) -> apseg::Result<()> {
    let bytes = std::fs::read(path)?;
    match bytes.get(..4) {
        Some(m) if m == features::MAGIC => {
            let f = features::decode(&bytes)?;
            println!("feature file {}", path.display());
            println!("version   {}", f.header.version);
            println!("image id  {}", f.header.image_id);
            println!("sha256    {}", util::sha256_hex(&bytes));
            println!("levels    {}", f.header.levels.len());
            for (lh, t) in f.header.levels.iter().zip(&f.features.levels) {
                let data: Vec<u8> = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
                let (lo, hi) = t.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
                println!(
                    "  level {}  {}×{}×{}  min {lo:.4} max {hi:.4}  sha256 {}",
                    lh.level_id,
                    lh.channels,
                    lh.height,
                    lh.width,
                    &util::sha256_hex(&data)[..16]
                );
            }
            Ok(())
        }
        Some(m) if m == checkpoint::MAGIC => {
            let ck = Checkpoint::decode(&bytes)?;
            println!("checkpoint {}", path.display());
            println!("version      {}", checkpoint::VERSION);
            println!("sha256       {}", util::sha256_hex(&bytes));
            println!("arch hash    {}", ck.arch_hash);
            println!("config hash  {}", ck.full_hash);
            println!("seed         {}", ck.seed);
            println!("step         {}", ck.step);
            println!("adam lr      {}", ck.adam.lr);
            let total: usize = ck.params.iter().map(|p| p.value.len()).sum();
            println!("parameters   {} tensors, {total} values", ck.params.len());
            println!("  {:<28} {:>14} {:>8}", "name", "shape", "count");
            for p in &ck.params {
                let shape = p.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("×");
                println!("  {:<28} {:>14} {:>8}", p.name, shape, p.value.len());
            }
            Ok(())
        }
        _ => Err(Error::Format(format!("{}: not a feature file or checkpoint", path.display()))),
    }
}
