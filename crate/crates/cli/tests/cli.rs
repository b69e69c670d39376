use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mvinfo"));
    c.env_remove("MVINFO_OUT");
    c
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(mode: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(mode)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_TRAIN: &str = r#"{
  "data": { "continuous": { "classes": 12, "test_classes": 6, "per_class": 8, "dim": 8, "style_dim": 4 } },
  "model": { "hidden": [16], "embedding_dim": 8 },
  "loss": { "cl": { "weight": 1.0, "kind": "cpc" }, "ip": { "auto_tenth": true } },
  "optimizer": { "lr": 0.01, "steps": 20, "batch_size": 16 },
  "eval_every": 10,
  "labeled_per_class": 2
}"#;

#[test]
fn train_without_loss_block_exits_with_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"data": {}, "optimizer": {"lr": 0.001, "steps": 10, "batch_size": 8}}"#,
    );
    let out = run("train", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`loss`"), "{err}");
}

#[test]
fn malformed_config_reports_line_and_column() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.json", "{\n  \"seeds\": [1,,]\n}\n");
    let out = run("bounds", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json:2:"), "{err}");
}

#[test]
fn unknown_field_and_missing_file_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"tables": {"tabels": 3}}"#);
    let out = run("bounds", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tabels"));
    let out = run("bounds", &dir.path().join("nope.json"), &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unwritable_output_directory_exits_with_code_two() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"tables": {"tables": 2}}"#);
    let out = run("bounds", &cfg, &blocker.join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn structured_theorem_suite_passes_and_random_names_failures() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "s.json", r#"{"tables": {"family": "structured", "tables": 60}}"#);
    let out = run("verify-theorems", &cfg, &dir.path().join("s"), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let m = json(&dir.path().join("s/manifest.json"));
    assert_eq!(m["pass"], true);

    let cfg = write_config(dir.path(), "r.json", r#"{"tables": {"tables": 60}}"#);
    let out = run("verify-theorems", &cfg, &dir.path().join("r"), &[]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[FAIL] compression_gap: I(Z^sup_min;X|T) = 0"), "{stdout}");
    assert!(stdout.contains("[PASS] task_relevant_information"), "{stdout}");
}

#[test]
fn bounds_mode_writes_the_interval_table() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "b.json", r#"{"tables": {"tables": 5}, "seeds": [3]}"#);
    run("bounds", &cfg, dir.path(), &[]);
    let csv = fs::read_to_string(dir.path().join("bounds.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("table_id,exact_pe,loose_lower,tight_lower,tight_upper,loose_upper")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("3-0,"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "t.json", SMALL_TRAIN);
    for out in ["a", "b"] {
        let o = run("train", &cfg, &dir.path().join(out), &["--seeds", "4,5"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["seed-4.json", "seed-5.json", "train.csv", "checkpoints/seed-4/param_000.f64"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
    let a = fs::read(dir.path().join("a/seed-4.json")).unwrap();
    let c = fs::read(dir.path().join("a/seed-5.json")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn train_reports_embed_hash_and_realized_ip_weight() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "t.json", SMALL_TRAIN);
    let o = run("train", &cfg, dir.path(), &["--seeds", "0,1,2,3,4"]);
    assert_eq!(o.status.code(), Some(0));
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["results"].as_array().unwrap().len(), 5);
    let hash = m["config_hash"].as_str().unwrap();
    for s in 0..5 {
        let r = json(&dir.path().join(format!("seed-{s}.json")));
        assert_eq!(r["config_hash"], hash);
        assert_eq!(r["result"]["ip_auto_tenth"], true);
        assert!(r["result"]["final_eval"]["accuracy"].as_f64().is_some());
        let ip = m["summary"]["realized"][s.to_string()]["weights"]["ip"].as_f64().unwrap();
        assert!(ip > 0.0);
    }
    let csv = fs::read_to_string(dir.path().join("train.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("seed,step,loss_cl,loss_fp,loss_ip,eval_acc"));
    assert_eq!(csv.lines().count(), 1 + 5 * 20);
    let last = csv.lines().last().unwrap();
    assert!(!last.ends_with(','), "final row carries the evaluation");
}

#[test]
fn eval_reads_checkpoints_written_by_train() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "t.json", SMALL_TRAIN);
    run("train", &cfg, &dir.path().join("train"), &["--seeds", "7"]);
    let trained = json(&dir.path().join("train/seed-7.json"));
    let eval = format!(
        r#"{{"data": {{ "continuous": {{ "classes": 12, "test_classes": 6, "per_class": 8, "dim": 8, "style_dim": 4 }} }},
            "labeled_per_class": 2,
            "evaluation": {{ "protocol": "knn", "checkpoints": {:?} }} }}"#,
        dir.path().join("train/checkpoints")
    );
    let ecfg = write_config(dir.path(), "e.json", &eval);
    let o = run("eval", &ecfg, &dir.path().join("eval"), &["--seeds", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("eval/seed-7.json"));
    assert_eq!(
        r["result"]["reports"][0]["accuracy"],
        trained["result"]["final_eval"]["accuracy"]
    );
}

#[test]
fn output_directory_precedence() {
    let dir = TempDir::new().unwrap();
    let cfg_out = dir.path().join("from-config");
    let cfg = write_config(
        dir.path(),
        "c.json",
        &format!(r#"{{"tables": {{"tables": 2}}, "out": {:?}}}"#, cfg_out),
    );
    let env_out = dir.path().join("from-env");
    let o = bin()
        .args(["bounds", "--config"])
        .arg(&cfg)
        .env("MVINFO_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.code().is_some());
    assert!(env_out.join("manifest.json").exists());
    bin().args(["bounds", "--config"]).arg(&cfg).output().unwrap();
    assert!(cfg_out.join("manifest.json").exists());
}

#[test]
fn gen_data_writes_both_worlds() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "g.json",
        r#"{"data": {"continuous": {"classes": 6, "test_classes": 2, "per_class": 3},
                     "discrete": {"t_size": 2, "corruption": 0.5}}}"#,
    );
    let o = run("gen-data", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
    let d = dir.path().join("data/seed-0");
    assert!(d.join("table.json").exists());
    assert!(d.join("dataset.json").exists());
    let r = json(&dir.path().join("seed-0.json"));
    assert!(r["result"]["discrete"]["epsilon_info"].as_f64().unwrap() >= 0.0);
}
