//! End-to-end runs of the command-line tool.

mod common;

use std::path::Path;
use std::process::{Command, Output};

fn vidground(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidground")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn write_config(dir: &Path) -> String {
    let mut cfg = common::tiny_config(0);
    cfg.data.val = Some(cfg.data.train.clone());
    if let Some(vidground::config::DataSource::Synth(s)) = &mut cfg.data.val {
        s.seed = 99;
        s.split = "val".into();
        s.id_prefix = "val".into();
    }
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn train_eval_score_inspect_and_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let stdout = ok(&vidground(&["train", "--config", &cfg, "--out", &s(&run)]));
    assert!(stdout.contains("iterations=2"), "{stdout}");
    for f in ["config.toml", "run_log.jsonl", "checkpoint/meta.json", "metrics_val.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let ckpt = s(&run.join("checkpoint"));
    let eval = dir.path().join("eval");
    ok(&vidground(&["eval", "--checkpoint", &ckpt, "--out", &s(&eval)]));
    let preds = eval.join("predictions_val.jsonl");
    assert!(preds.is_file());

    let data = dir.path().join("data");
    ok(&vidground(&["synth", "--config", &cfg, "--out", &s(&data)]));
    let manifest = s(&data.join("val/manifest.jsonl"));
    let scored = ok(&vidground(&["score", "--predictions", &s(&preds), "--manifest", &manifest]));
    let direct = std::fs::read_to_string(eval.join("metrics_val.json")).unwrap();
    let direct: vidground::metrics::MetricReport = serde_json::from_str(&direct).unwrap();
    assert_eq!(scored, direct.to_key_values());

    let inspect = ok(&vidground(&["inspect", &ckpt]));
    assert!(inspect.contains("iteration=2"));
    assert_eq!(inspect.lines().filter(|l| l.starts_with("region")).count(), 4);

    let heat = dir.path().join("heat");
    let out = ok(&vidground(&["heatmap", "--checkpoint", &ckpt, "--out", &s(&heat)]));
    assert!(out.contains("top_word="));
    for f in ["heatmap.csv", "heatmap.png", "heatmap.json", "alignment.json"] {
        assert!(heat.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn oracle_eval_reports_perfect_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = ok(&vidground(&["eval", "--oracle", "--config", &cfg, "--out", &s(dir.path())]));
    assert!(out.contains("m_iou=1"), "{out}");
}

#[test]
fn validate_accepts_good_and_rejects_corrupt_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    ok(&vidground(&["synth", "--config", &cfg, "--out", &s(dir.path())]));
    let manifest = dir.path().join("train/manifest.jsonl");
    ok(&vidground(&["validate", "--manifest", &s(&manifest)]));
    ok(&vidground(&["inspect", &s(&manifest)]));

    let text = std::fs::read_to_string(&manifest).unwrap();
    let bad = text.replacen("\"target_id\":\"subject\"}", "\"target_id\":\"ghost\"}", 1);
    assert_ne!(bad, text);
    let bad_path = dir.path().join("train/bad.jsonl");
    std::fs::write(&bad_path, bad).unwrap();
    let out = vidground(&["validate", "--manifest", &s(&bad_path)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("synth-"), "{err}");

    std::fs::remove_file(dir.path().join("train/frames/synth-00000.safetensors")).unwrap();
    let out = vidground(&["validate", "--manifest", &s(&manifest)]);
    assert!(!out.status.success());
}

#[test]
fn invalid_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[model]\nnum_queries = 0\n").unwrap();
    let out = vidground(&["validate", "--config", &s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&path, "[model]\nno_such_key = 1\n").unwrap();
    assert_eq!(vidground(&["validate", "--config", &s(&path)]).status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&vidground(&["synth", "--config", &cfg, "--seed", "1", "--out", &s(&a)]));
    ok(&vidground(&["synth", "--config", &cfg, "--seed", "2", "--out", &s(&b)]));
    let read = |p: &Path| std::fs::read_to_string(p.join("train/manifest.jsonl")).unwrap();
    assert_ne!(read(&a), read(&b));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = ok(&vidground(&["sweep", "--config", &cfg, "--axis", "frames", "--values", "2,4", "--out", &s(dir.path())]));
    assert_eq!(out.lines().count(), 3, "{out}");
    assert!(dir.path().join("sweep.csv").is_file());
}
