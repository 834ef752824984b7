use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_geomix"));
    c.env("GEOMIX_THREADS", "1");
    c
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).expect("stdout is json")
}

#[test]
fn verify_passes_on_shipped_checkpoint() {
    let d = data_dir();
    let o = run(bin().args(["verify", "--trials", "12", "--checkpoint"]).arg(d.join("toy-checkpoint.json")).arg("--data").arg(d.join("toy.jsonl")));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["pass"], true);
    assert_eq!(v["reports"].as_array().unwrap().len(), 4);
}

#[test]
fn missing_data_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin().args(["train", "--data", "does-not-exist.jsonl", "--out"]).arg(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does-not-exist.jsonl"));
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    assert_eq!(run(bin().arg("frobnicate")).status.code(), Some(2));
    assert_eq!(run(bin().args(["split", "--bogus"])).status.code(), Some(2));
}

#[test]
fn invalid_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin()
        .args(["train", "--data"])
        .arg(data_dir().join("toy.jsonl"))
        .arg("--out")
        .arg(dir.path())
        .args(["--set", "hidden_dim=16", "--set", "attention_heads=3"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[config]"));
}

#[test]
fn predict_and_eval() {
    let d = data_dir();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("pred.csv");
    let o = run(bin().args(["predict", "--checkpoint"]).arg(d.join("toy-checkpoint.json")).arg("--data").arg(d.join("toy.jsonl")).arg("--out").arg(&csv));
    assert!(o.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,y_pred,y_true,abs_err"));
    assert_eq!(lines.count(), 24);

    let clean = run(bin().args(["eval", "--checkpoint"]).arg(d.join("toy-checkpoint.json")).arg("--data").arg(d.join("toy.jsonl")));
    let noisy = run(bin()
        .args(["eval", "--perturb-sigma", "0.5", "--checkpoint"])
        .arg(d.join("toy-checkpoint.json"))
        .arg("--data")
        .arg(d.join("toy.jsonl")));
    assert!(clean.status.success() && noisy.status.success());
    let (c, n) = (stdout_json(&clean), stdout_json(&noisy));
    assert_eq!(n["perturb_sigma"], 0.5);
    assert_ne!(c["metrics"]["mse"], n["metrics"]["mse"]);
}

#[test]
fn split_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin().args(["split", "--mode", "random", "--seed", "3", "--data"]).arg(data_dir().join("toy.jsonl")).arg("--out").arg(dir.path()));
    assert!(o.status.success());
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("split.json")).unwrap()).unwrap();
    assert_eq!(m["sizes"], serde_json::json!([17, 5, 2]));
    assert_eq!(m["test"].as_array().unwrap().len(), 2);
}

#[test]
fn training_is_reproducible() {
    let d = data_dir();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (k, dir) in dirs.iter().enumerate() {
        let o = run(bin()
            .env("GEOMIX_THREADS", if k == 0 { "1" } else { "3" })
            .args(["train", "--quiet", "--epochs", "2", "--config"])
            .arg(d.join("toy.toml"))
            .arg("--data")
            .arg(d.join("toy.jsonl"))
            .arg("--out")
            .arg(dir.path()));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["history.csv", "checkpoint.json", "split.json", "manifest.json"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}
