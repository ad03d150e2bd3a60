//! Drives the `affuse` binary through synth → train → eval → predict on a tiny
//! configuration.

use std::path::Path;
use std::process::{Command, Output};

use affuse::config::TrainConfig;

fn affuse(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_affuse")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(
        out.status.success(),
        "affuse {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.cfg");
    let mut cfg = TrainConfig::tiny();
    cfg.window = 32;
    cfg.stride = 16;
    cfg.epochs = 2;
    cfg.folds = 3;
    cfg.save(&cfg_path).unwrap();

    let data = dir.path().join("data");
    affuse(&["synth", "--out", s(&data), "--sequences", "6", "--frames", "40", "--seed", "3", "--snr", "10", "--config", s(&cfg_path)]);
    let manifest = data.join("manifest.csv");
    assert!(manifest.exists());

    let run = dir.path().join("run");
    let out = affuse(&["train", "--config", s(&cfg_path), "--data", s(&manifest), "--fold", "1", "--out", s(&run)]);
    let trained = String::from_utf8_lossy(&out.stdout).to_string();
    for f in ["best.ckpt", "last.ckpt", "config.txt", "train.log"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert_eq!(std::fs::read_to_string(run.join("train.log")).unwrap().lines().count(), 2);
    assert_eq!(TrainConfig::load(&run.join("config.txt")).unwrap(), cfg);

    let ckpt = run.join("best.ckpt");
    let out = affuse(&["eval", "--checkpoint", s(&ckpt), "--config", s(&cfg_path), "--data", s(&manifest), "--fold", "1"]);
    let line = String::from_utf8_lossy(&out.stdout).trim().to_string();
    let fields: Vec<&str> = line.split(',').collect();
    assert_eq!(fields.len(), 4, "{line}");
    assert_eq!(fields[0], "1");
    assert!(trained.trim().ends_with(&line), "train reported {trained:?}, eval {line:?}");

    let feat = |m: &str| data.join(format!("seq_000.{m}.bin"));
    let pred = dir.path().join("pred.csv");
    affuse(&[
        "predict", "--checkpoint", s(&ckpt), "--config", s(&cfg_path),
        "--features", s(&feat("visual")), s(&feat("vggish")), s(&feat("logmel")),
        "--out", s(&pred),
    ]);
    let text = std::fs::read_to_string(&pred).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frame,valence,arousal"));
    let rows: Vec<Vec<f32>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().enumerate().all(|(i, r)| r[0] as usize == i && r[1].abs() <= 1.0 && r[2].abs() <= 1.0));
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "learning_rate = 0.1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_affuse")).args(["gradcheck", "--tiny", "--config", s(&bad)]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown key"), "{err}");
}
