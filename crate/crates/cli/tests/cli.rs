use std::path::Path;
use std::process::{Command, Output};

fn ravar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ravar")).args(args).output().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = ravar(&[
        "gen", "--num", "6", "--frames", "4", "--grid", "2x3", "--dim", "16", "--classes", "4", "--seed", "3",
        "--out", arg(&data),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("annotations.jsonl").exists());

    let config = dir.path().join("train.toml");
    std::fs::write(
        &config,
        "steps = 5\nbatch_size = 2\nframes = 4\n[model]\ndim = 16\nnum_classes = 4\nssm_dim = 8\nattn_dim = 8\nstate_dim = 4\n",
    )
    .unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("loss.csv");
    let out = ravar(&[
        "train", "--data", arg(&data), "--config", arg(&config), "--out-ckpt", arg(&ckpt), "--log", arg(&log),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&log).unwrap();
    assert_eq!(csv.lines().count(), 6);

    let report = dir.path().join("report.json");
    let out = ravar(&["eval", "--ckpt", arg(&ckpt), "--data", arg(&data), "--report", arg(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["num_samples"], 6);
    for key in ["mIOU", "mAP", "AUROC"] {
        assert!(json[key].is_number(), "missing {key}");
    }
}

#[test]
fn train_rejects_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(ravar(&["gen", "--num", "2", "--frames", "4", "--out", arg(&data)]).status.success());
    let out = ravar(&["train", "--data", arg(&data), "--out-ckpt", arg(&dir.path().join("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frames"));
}

#[test]
fn missing_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ravar(&[
        "train", "--data", arg(&dir.path().join("nope")), "--out-ckpt", arg(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_suites_pass() {
    for suite in ["scan", "map", "auroc"] {
        let out = ravar(&["oracle", "--suite", suite, "--cases", "25"]);
        assert!(out.status.success(), "{suite}: {}", String::from_utf8_lossy(&out.stdout));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("PASS"));
    }
}

#[test]
fn gradcheck_with_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("gc.toml");
    std::fs::write(&config, "samples = 1\n").unwrap();
    let out = ravar(&["gradcheck", "--config", arg(&config), "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn bad_grid_flag_is_rejected() {
    let out = ravar(&["gen", "--grid", "4by4", "--out", "/tmp/unused"]);
    assert!(!out.status.success());
}
