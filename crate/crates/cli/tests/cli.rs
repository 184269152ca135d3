use std::fs;
use std::path::Path;
use std::process::Command;

fn bin(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hiperformer"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = bin(&["default-config"], d);
    assert!(cfg.status.success());
    let text = String::from_utf8(cfg.stdout).unwrap();
    let small = text
        .replace("input_size = 64", "input_size = 32")
        .replace("size = 64", "size = 32")
        .replace("train_count = 400", "train_count = 8")
        .replace("test_count = 64", "test_count = 2");
    fs::write(d.join("exp.toml"), small).unwrap();

    let out = bin(
        &[
            "train", "--config", "exp.toml", "--out", "run", "--steps", "2",
        ],
        d,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "experiment.toml",
        "loss.jsonl",
        "report.jsonl",
        "checkpoint/config.toml",
    ] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(d.join("run/loss.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let out = bin(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint",
            "--config",
            "exp.toml",
            "--report",
            "eval.jsonl",
        ],
        d,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        fs::read(d.join("eval.jsonl")).unwrap(),
        fs::read(d.join("run/report.jsonl")).unwrap()
    );

    assert!(bin(&["synth", "--config", "exp.toml", "--out", "syn"], d)
        .status
        .success());
    let out = bin(
        &[
            "infer",
            "--checkpoint",
            "run/checkpoint",
            "--input",
            "syn/test/00000_image.png",
            "--output",
            "pred.png",
        ],
        d,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(d.join("pred.png").exists());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(!bin(&["eval", "--checkpoint", "missing"], d)
        .status
        .success());
    fs::write(d.join("bad.toml"), "[model]\nwidths = [8, 4, 2, 1]\n").unwrap();
    let out = bin(&["train", "--config", "bad.toml"], d);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
