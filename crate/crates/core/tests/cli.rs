use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_GRID: &str = r#"{"kind":"measure_correlation",
  "dataset":{"source":"synth","config":{"n_samples":120},"n_test":200},
  "grid":{"batch_sizes":[16,64],"learning_rates":[0.05],"seeds":[0],"max_epochs":80,"convergence_loss":10.0}}"#;

fn flatlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flatlab")).args(args).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

fn grid(cfg: &Path, out: &Path) -> Output {
    flatlab(&["grid", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
}

#[test]
fn validation_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = flatlab(&["grid", "--config", "/nonexistent/config.json"]);
    assert_eq!(missing.status.code(), Some(2));

    let bad = write_config(tmp.path(), "{\"kind\": \"measure_correlation\",");
    assert_eq!(flatlab(&["grid", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let cfg = write_config(tmp.path(), SMALL_GRID);
    let zero = flatlab(&["grid", "--config", cfg.to_str().unwrap(), "--workers", "0"]);
    assert_eq!(zero.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&zero.stderr).contains("workers"));

    let csv = write_config(
        tmp.path(),
        r#"{"dataset":{"source":"csv","train":"/nonexistent/a.csv","test":"/nonexistent/b.csv","label_column":0}}"#,
    );
    assert_eq!(flatlab(&["synth", "--config", csv.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn grid_writes_parsable_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_GRID);
    let out = tmp.path().join("out");
    ok(grid(&cfg, &out));

    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').count(), header.len());
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert!(json.is_object() || json.is_array());

    let figures: Vec<_> = fs::read_dir(out.join("figures")).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(!figures.is_empty());
    for f in figures {
        let text = fs::read_to_string(&f).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }
}

#[test]
fn interrupted_grid_resumes_to_same_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_GRID);
    let out = tmp.path().join("out");
    ok(grid(&cfg, &out));
    let full = fs::read(out.join("results.csv")).unwrap();

    let log = out.join("runs.jsonl");
    let text = fs::read_to_string(&log).unwrap();
    let first = text.lines().next().unwrap();
    fs::write(&log, format!("{first}\n{{\"run_id\": \"r001")).unwrap();
    fs::remove_file(out.join("results.csv")).unwrap();
    ok(grid(&cfg, &out));
    assert_eq!(fs::read(out.join("results.csv")).unwrap(), full);

    let rebuilt = tmp.path().join("rebuilt");
    ok(flatlab(&[
        "report",
        "--in-dir",
        out.to_str().unwrap(),
        "--out-dir",
        rebuilt.to_str().unwrap(),
    ]));
    assert_eq!(fs::read(rebuilt.join("results.csv")).unwrap(), full);
}

#[test]
fn changed_config_does_not_reuse_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_GRID);
    let out = tmp.path().join("out");
    ok(grid(&cfg, &out));
    let a = fs::read(out.join("results.csv")).unwrap();
    ok(flatlab(&["grid", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out-dir", out.to_str().unwrap()]));
    assert_ne!(fs::read(out.join("results.csv")).unwrap(), a);
}

#[test]
fn synth_train_measure_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_GRID);
    let c = cfg.to_str().unwrap();
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();

    ok(flatlab(&["synth", "--config", c, "--out-dir", o]));
    assert_eq!(fs::read_to_string(out.join("train.csv")).unwrap().lines().count(), 121);
    assert_eq!(fs::read_to_string(out.join("test.csv")).unwrap().lines().count(), 201);

    ok(flatlab(&["train", "--config", c, "--out-dir", o]));
    assert_eq!(fs::read_to_string(out.join("train.csv")).unwrap().lines().count(), 3);
    let ckpt = fs::read_dir(out.join("checkpoints")).unwrap().next().unwrap().unwrap().path();
    let m = ckpt.to_str().unwrap();

    ok(flatlab(&["measure", "--config", c, "--out-dir", o, "--model", m]));
    let measured = fs::read_to_string(out.join("measure.csv")).unwrap();
    assert_eq!(measured.lines().count(), 2);
    assert!(measured.lines().next().unwrap().contains("kappa_tr"));

    ok(flatlab(&["rep", "--config", c, "--out-dir", o, "--model", m]));
    assert_eq!(fs::read_to_string(out.join("bound.csv")).unwrap().lines().count(), 2);

    ok(flatlab(&["robust", "--config", c, "--out-dir", o, "--model", m, "--samples", "200", "--adversarial", "20"]));
    let robust: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("robust.json")).unwrap()).unwrap();
    assert!(robust["theorem5"]["kappa_tr"].as_f64().unwrap() >= 0.0);
    assert!(robust["uniform_bound"].is_object());
}
