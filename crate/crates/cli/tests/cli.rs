use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn maxstab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maxstab")).args(args).output().expect("spawn maxstab")
}

fn ok(args: &[&str]) -> Output {
    let out = maxstab(args);
    assert!(
        out.status.success(),
        "maxstab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_TRAINING: &str = r#"
[training]
batch_size = 8
m_train = 10
m_predict = 50
max_epochs = 2

[network]
channels = [4, 8]
dense = 16
"#;

#[test]
fn usage_errors_exit_one() {
    assert_eq!(maxstab(&[]).status.code(), Some(1));
    assert_eq!(maxstab(&["simulate", "--bogus"]).status.code(), Some(1));
    assert_eq!(maxstab(&["--help"]).status.code(), Some(0));

    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("never");
    let bad = maxstab(&["simulate", "--family", "gaussian", "--out", p(&out), "--n", "2"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(!out.exists(), "nothing is written for an invalid config");

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[prior]\nlambda = [5.0, 0.5]\nnu = [0.3, 1.8]\n").unwrap();
    assert_eq!(maxstab(&["simulate", "--config", p(&cfg), "--out", p(&out)]).status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing");
    let out = maxstab(&["madogram", "--data", p(&missing), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_train_estimate_pipeline() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, SMALL_TRAINING).unwrap();
    let common = ["--config", p(&cfg), "--grid", "8", "--seed", "3"];

    let out = ok(&[&["simulate", "--n", "24", "--out", p(&data)], &common[..]].concat());
    let echoed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(echoed["n_train"], 24);
    assert_eq!(echoed["grid"]["nx"], 8);
    assert!(data.join("config.json").exists());

    // Same seed gives byte-identical fields.
    let again = tmp.path().join("again");
    ok(&[&["simulate", "--n", "24", "--out", p(&again)], &common[..]].concat());
    assert_eq!(fs::read(data.join("fields.bin")).unwrap(), fs::read(again.join("fields.bin")).unwrap());

    let run = tmp.path().join("run");
    ok(&[&["train", "--data", p(&data), "--out", p(&run), "--epochs", "1"], &common[..]].concat());
    assert!(run.join("model.ckpt").exists());
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let resumed = tmp.path().join("resumed");
    ok(&[
        &["train", "--data", p(&data), "--out", p(&resumed), "--resume", p(&run.join("model.ckpt"))],
        &common[..],
    ]
    .concat());
    assert!(fs::read_to_string(resumed.join("log.csv")).unwrap().lines().count() >= 2);

    let est = tmp.path().join("est");
    let model = run.join("model.ckpt");
    ok(&[
        &["estimate", "--model", p(&model), "--data", p(&data), "--index", "5", "--out", p(&est)],
        &common[..],
    ]
    .concat());
    let first = fs::read_to_string(est.join("estimate.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["kind"], "posterior");
    assert_eq!(v["method"], "en");
    ok(&[
        &["estimate", "--model", p(&model), "--data", p(&data), "--index", "5", "--out", p(&est)],
        &common[..],
    ]
    .concat());
    assert_eq!(first, fs::read_to_string(est.join("estimate.json")).unwrap());

    // Out-of-range index and unknown method are usage errors.
    let code = |extra: &[&str]| {
        maxstab(&[&["estimate", "--model", p(&model), "--data", p(&data), "--out", p(&est)], extra, &common[..]].concat())
            .status
            .code()
    };
    assert_eq!(code(&["--index", "24"]), Some(1));
    assert_eq!(code(&["--method", "mle"]), Some(1));

    let point = tmp.path().join("point");
    ok(&[&["train", "--data", p(&data), "--out", p(&point), "--epochs", "1", "--point"], &common[..]].concat());
    let pest = tmp.path().join("pest");
    ok(&[
        &["estimate", "--model", p(&point.join("model.ckpt")), "--data", p(&data), "--out", p(&pest)],
        &common[..],
    ]
    .concat());
    let v: serde_json::Value = serde_json::from_slice(&fs::read(pest.join("estimate.json")).unwrap()).unwrap();
    assert_eq!(v["kind"], "point");
    assert_eq!(v["method"], "cnn");
}

#[test]
fn estimate_pl_from_csv_field() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["simulate", "--n", "1", "--grid", "6", "--seed", "1", "--out", p(&data)]);
    let csv = tmp.path().join("field.csv");
    let values = fs::read(data.join("fields.bin")).unwrap();
    let mut text = String::from("ix,iy,value\n");
    for (k, chunk) in values.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        text += &format!("{},{},{v}\n", k % 6, k / 6);
    }
    fs::write(&csv, text).unwrap();
    let cfg = tmp.path().join("pl.toml");
    fs::write(&cfg, "[pl]\nn_starts = 4\nn_refine = 2\n").unwrap();
    let est = tmp.path().join("est");
    ok(&["estimate", "--method", "pl", "--field", p(&csv), "--config", p(&cfg), "--out", p(&est)]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(est.join("estimate.json")).unwrap()).unwrap();
    assert_eq!(v["method"], "pl");
    assert!(v["params"].is_object(), "{v}");
    assert_eq!(v["report"]["stage1"].as_array().unwrap().len(), 4);
}

#[test]
fn benchmark_writes_tables() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bench.toml");
    fs::write(
        &cfg,
        r#"
n_train = 16
n_test = 3
methods = ["oracle", "pl", "cnn"]

[grid]
nx = 6
ny = 6
extent = [0.0, 6.0, 0.0, 6.0]

[training]
batch_size = 8
max_epochs = 1

[network]
channels = [4]
dense = 8

[pl]
n_starts = 2
n_refine = 1
"#,
    )
    .unwrap();
    let out = tmp.path().join("bench");
    ok(&["benchmark", "--config", p(&cfg), "--out", p(&out)]);
    for f in ["config.json", "metrics.csv", "metrics.json", "records.json", "score_map.csv", "run_log.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(out.join("models/cnn.ckpt").exists());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "scenario,method,metric,mean,std,n,failures");
    assert_eq!(metrics.lines().count(), 1 + 3 * 8);
    assert!(metrics.contains("base-brown-resnick,oracle,MSE_lambda,0.0,"), "{metrics}");
}

#[test]
fn gev_and_madogram_commands() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["simulate", "--n", "30", "--grid", "5", "--seed", "2", "--out", p(&data)]);

    let mado = tmp.path().join("mado");
    ok(&["madogram", "--data", p(&data), "--bin-width", "1", "--out", p(&mado)]);
    let text = fs::read_to_string(mado.join("madogram.csv")).unwrap();
    assert!(text.lines().count() > 2);
    assert_eq!(
        maxstab(&["madogram", "--data", p(&data), "--margin", "weird", "--out", p(&mado)]).status.code(),
        Some(1)
    );

    let gev = tmp.path().join("gev");
    ok(&["gev", "--data", p(&data), "--out", p(&gev)]);
    let surface: serde_json::Value = serde_json::from_slice(&fs::read(gev.join("surface.json")).unwrap()).unwrap();
    assert_eq!(surface["coefficients"].as_array().unwrap().len(), 6);
    assert!(gev.join("coefficients.csv").exists());
    assert!(gev.join("frechet/fields.bin").exists());
    assert_eq!(maxstab(&["gev", "--data", p(&data), "--years", "5", "--out", p(&gev)]).status.code(), Some(1));
}
