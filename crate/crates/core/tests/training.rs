mod common;

use apseg::checkpoint::Checkpoint;
use apseg::config::RunConfig;
use apseg::episodes::sample_episode;
use apseg::experiment;
use apseg::model::{EpisodeInput, Model};
use apseg::tensor::AdamConfig;
use apseg::trainer::train_step;

fn small() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.data.per_class = 6;
    cfg.train.steps = 10;
    cfg.train.batch = 2;
    cfg.eval.runs = 2;
    cfg.eval.episodes = 6;
    cfg
}

#[test]
fn overfits_single_episodes() {
    for pick in [1, 2, 3] {
        let losses = common::overfit_losses(&RunConfig::desk(), 50, pick);
        let first = losses.iter().position(|&l| l < 0.2);
        assert!(first.is_some(), "episode {pick}: losses {losses:?}");
    }
}

#[test]
fn zero_lr_changes_nothing() {
    let cfg = small();
    let enc = experiment::encoder(&cfg);
    let ds = experiment::train_dataset(&cfg, &enc).unwrap();
    let ep = sample_episode(&ds, 1, &mut common::rng(4)).unwrap();
    let mut model = Model::<f32>::new(&cfg.arch(), 1).unwrap();
    let before = model.params.clone();
    train_step(&mut model, &[(EpisodeInput::from_episode(&ep), ep.query.mask())], &AdamConfig::with_lr(0.0)).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(model.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn encoder_is_untouched_by_training() {
    let cfg = small();
    let enc = experiment::encoder(&cfg);
    let sum = enc.checksum();
    let ds = experiment::train_dataset(&cfg, &enc).unwrap();
    let tr = experiment::train(&cfg, &ds, |_| {}).unwrap();
    assert_eq!(enc.checksum(), sum);
    assert_eq!(experiment::encoder(&cfg).checksum(), sum);
    assert!(tr.model.params.iter().all(|(_, p)| !p.name.starts_with("enc")));
}

#[test]
fn same_seed_same_results_and_exact_resume() {
    common::determinism(&small(), 5).unwrap();
}

#[test]
fn checkpoint_file_round_trip() {
    let cfg = small();
    let model = Model::<f32>::new(&cfg.arch(), 3).unwrap();
    let ck = Checkpoint::from_model(&model, &cfg, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.apck");
    let hash = ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.hash(), hash);
}
