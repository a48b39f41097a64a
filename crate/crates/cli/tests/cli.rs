use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "[data]\nper_class = 12\n\n[train]\nsteps = 8\nlog_every = 4\n";

fn apseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apseg")).args(args).output().expect("spawn apseg")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn kv(path: &Path) -> Vec<(String, String)> {
    apseg::report::parse_kv(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn get<'a>(kv: &'a [(String, String)], k: &str) -> &'a str {
    kv.iter().find(|(a, _)| a == k).map(|(_, v)| v.as_str()).unwrap_or_else(|| panic!("missing {k}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let o = apseg(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["train.log", "config.toml", "model.apck"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 8);

    let ck = run.join("model.apck");
    let ev = dir.path().join("eval");
    let o = apseg(&["eval", "--checkpoint", s(&ck), "--runs", "2", "--episodes", "6", "--render", "2", "--out", s(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = kv(&ev.join("report.kv"));
    assert_eq!(get(&r, "runs"), "2");
    assert_eq!(get(&r, "domain"), "target");
    assert_eq!(get(&r, "seed"), "3");
    let mean: f64 = get(&r, "mean").parse().unwrap();
    assert!((0.0..=1.0).contains(&mean));
    assert!(std::fs::read_to_string(ev.join("report.txt")).unwrap().contains("mean mIoU"));
    let renders: Vec<_> = std::fs::read_dir(ev.join("renders")).unwrap().collect();
    assert!(!renders.is_empty());

    let o = apseg(&["inspect", s(&ck)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains(get(&r, "arch_hash")));

    let o = apseg(&["train", "--config", s(&cfg), "--resume", s(&ck), "--steps", "12", "--out", s(&dir.path().join("more"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn same_seed_same_checkpoint_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let hash = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = apseg(&["train", "--config", s(&cfg), "--seed", seed, "--steps", "4", "--out", s(&out)]);
        assert_eq!(code(&o), 0);
        let line = String::from_utf8(o.stdout).unwrap();
        (line.split_whitespace().last().unwrap().to_string(), std::fs::read(out.join("model.apck")).unwrap())
    };
    let (a, ba) = hash("a", "5");
    let (b, bb) = hash("b", "5");
    let (c, _) = hash("c", "6");
    assert_eq!(a, b);
    assert_eq!(ba, bb);
    assert_ne!(a, c);
}

#[test]
fn oracle_eval_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("oracle");
    let o = apseg(&["eval", "--oracle", "--config", s(&cfg), "--runs", "2", "--episodes", "20", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = kv(&out.join("report.kv"));
    assert_eq!(get(&r, "mean"), "1.000000");
    assert_eq!(get(&r, "std"), "0.000000");
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nstepz = 3\n").unwrap();
    let o = apseg(&["train", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));

    std::fs::write(&bad, "[data]\ntest_classes = [5, 6]\n").unwrap();
    assert_eq!(code(&apseg(&["train", "--config", s(&bad), "--out", s(dir.path())])), 2);
    assert_eq!(code(&apseg(&["ablate", "--axis", "depth", "--out", s(dir.path())])), 2);
    assert_eq!(code(&apseg(&["config", "--preset", "huge"])), 2);
}

#[test]
fn architecture_mismatch_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    assert_eq!(code(&apseg(&["train", "--config", s(&cfg), "--steps", "1", "--out", s(&run)])), 0);
    let other = dir.path().join("other.toml");
    std::fs::write(&other, format!("{SMALL}\n[mpg]\nk = 8\n")).unwrap();
    let o = apseg(&[
        "eval", "--checkpoint", s(&run.join("model.apck")), "--config", s(&other), "--episodes", "2", "--out",
        s(&dir.path().join("ev")),
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn malformed_files_exit_five() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.apck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&apseg(&["inspect", s(&junk)])), 5);
    let o = apseg(&["eval", "--checkpoint", s(&junk), "--out", s(dir.path())]);
    assert_eq!(code(&o), 5);
}

#[test]
fn divergent_training_exits_three_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.toml");
    std::fs::write(&cfg, "[data]\nper_class = 12\n\n[train]\nsteps = 40\nlr = 1e38\n").unwrap();
    let out = dir.path().join("run");
    let o = apseg(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("nonfinite_dump.txt").exists());
    assert!(!out.join("model.apck").exists());
}

#[test]
fn features_command_writes_readable_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("feats");
    let o = apseg(&["features", "--per-class", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(!files.is_empty());
    for f in &files {
        apseg::features::load_features(f).unwrap();
        assert_eq!(code(&apseg(&["inspect", s(f)])), 0);
    }
}

#[test]
fn printed_config_parses_back() {
    for preset in ["desk", "paper"] {
        let o = apseg(&["config", "--preset", preset]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8(o.stdout).unwrap();
        assert_eq!(apseg::config::RunConfig::from_toml(&text).unwrap(), apseg::config::RunConfig::preset(preset).unwrap());
    }
}
