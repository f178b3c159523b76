use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sidemoe::harness::{AblationRow, RunConfig};

fn sidemoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sidemoe")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = sidemoe(args);
    assert!(
        out.status.success(),
        "sidemoe {} exited {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// A small run so the whole file stays quick.
fn small_config(dir: &Path) -> String {
    let mut cfg = RunConfig::default();
    cfg.task.train_size = 128;
    cfg.task.val_size = 64;
    cfg.task.test_size = 64;
    cfg.train.epochs = 4;
    cfg.requant.interval = 2;
    let path = dir.join("small.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn quantize_hand_example() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.csv");
    fs::write(&input, "-1,0,2\n").unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["--out", out, "quantize", input.to_str().unwrap(), "-n", "8"]);
    let report = json(&dir.path().join("quant_report.json"));
    assert_eq!(report["s"].as_f64().unwrap(), 3.0 / 255.0);
    assert_eq!(report["z"], 85);
    assert_eq!(report["n"], 8);
    assert_eq!(report["error_q"].as_f64().unwrap(), 0.0);
    assert!(dir.path().join("quantized.smqt").exists());
    assert!(dir.path().join("quantized.json").exists());
}

#[test]
fn quantize_error_shrinks_with_bits() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.csv");
    let values: Vec<String> = (0..200).map(|i| format!("{}", ((i * 37) % 101) as f64 / 13.0 - 3.5)).collect();
    fs::write(&input, values.join(",")).unwrap();
    let mut errors = Vec::new();
    for bits in ["8", "16"] {
        let out = dir.path().join(bits);
        ok(&["--out", out.to_str().unwrap(), "quantize", input.to_str().unwrap(), "--bits", bits]);
        errors.push(json(&out.join("quant_report.json"))["error_q"].as_f64().unwrap());
    }
    assert!(errors[1] <= errors[0], "{errors:?}");
}

#[test]
fn quantize_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert_eq!(sidemoe(&["--out", out, "quantize", empty.to_str().unwrap()]).status.code(), Some(2));
    let junk = dir.path().join("junk.csv");
    fs::write(&junk, "1,x,3\n").unwrap();
    assert_eq!(sidemoe(&["--out", out, "quantize", junk.to_str().unwrap()]).status.code(), Some(4));
    let w = dir.path().join("w.csv");
    fs::write(&w, "1,2\n").unwrap();
    assert_eq!(sidemoe(&["--out", out, "quantize", w.to_str().unwrap(), "-n", "1"]).status.code(), Some(2));
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    ok(&["--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3", "train"]);
    for name in [
        "report.csv",
        "summary.json",
        "requant_events.csv",
        "routing.csv",
        "checkpoint.smck",
        "checkpoint.json",
    ] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
    assert!(report.starts_with("epoch,task_loss,balance_loss,total_loss"));
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["seed"], 3);
    assert_eq!(summary["epochs"], 4);
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[requant]\nfractoin = 0.1\n").unwrap();
    let out = sidemoe(&["--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fractoin"));

    fs::write(&path, "[router]\nexperts = 4\ntop_k = 5\n").unwrap();
    let out = sidemoe(&["--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("top_k"));
}

#[test]
fn memory_report_floor_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["--out", dir.path().to_str().unwrap(), "memory-report"]);
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let doc = json(&dir.path().join("memory_report.json"));
    assert_eq!(printed, doc);
    let sweep = doc["report"]["r_sweep"].as_array().unwrap();
    let r2 = sweep.iter().find(|row| row["r"] == 2).unwrap();
    assert_eq!(r2["equals_floor"], true);
    let backprop: Vec<f64> = sweep.iter().map(|row| row["side_backprop"].as_f64().unwrap()).collect();
    assert!(backprop.windows(2).all(|w| w[1] <= w[0]), "{backprop:?}");
    assert!(doc["run"]["total"].as_f64().unwrap() > 0.0);

    let path = dir.path().join("uniform8.toml");
    fs::write(
        &path,
        "[memory]\nlayer_norm_bits = 8\nside_bits = 8\n[quantizer]\nbits = 8\n",
    )
    .unwrap();
    ok(&["--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "memory-report"]);
    let doc = json(&dir.path().join("memory_report.json"));
    assert_eq!(doc["report"]["weights"]["savings_ratio"].as_f64().unwrap(), 0.75);
}

#[test]
fn ablate_rows_follow_the_axis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().to_str().unwrap();
    ok(&["--config", &cfg, "--out", out, "ablate", "--axis", "p"]);
    let mut reader = csv::Reader::from_path(dir.path().join("ablation_p.csv")).unwrap();
    let rows: Vec<AblationRow> = reader.deserialize().map(Result::unwrap).collect();
    let values: Vec<&str> = rows.iter().map(|r| r.value.as_str()).collect();
    assert_eq!(values, ["0", "0.05", "0.10", "0.50"]);
    for v in &values {
        assert!(dir.path().join("ablation_p").join(format!("{v}.json")).exists());
    }

    ok(&["--config", &cfg, "--out", out, "ablate", "--axis", "N", "--values", "3,5"]);
    let mut reader = csv::Reader::from_path(dir.path().join("ablation_N.csv")).unwrap();
    assert_eq!(reader.records().count(), 2);
}

#[test]
fn single_value_ablation_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().to_str().unwrap();
    ok(&["--config", &cfg, "--out", out, "ablate", "--axis", "component", "--values", "both"]);
    ok(&["--config", &cfg, "--out", out, "train"]);
    let row = json(&dir.path().join("ablation_component").join("both.json"));
    let summary = json(&dir.path().join("summary.json"));
    assert_eq!(row["final_val_accuracy"], summary["final_val_accuracy"]);
    assert_eq!(row["test_accuracy"], summary["test_accuracy"]);
    assert_eq!(row["final_error_q"], summary["final_error_q"]);
    assert_eq!(row["memory_bytes"], summary["memory"]["total"]);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(sidemoe(&["--out", out, "ablate", "--axis", "depth"]).status.code(), Some(2));
    assert_eq!(sidemoe(&["--out", out, "ablate", "--axis", "p", "--values", "1.5"]).status.code(), Some(2));
    assert_eq!(sidemoe(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn help_lists_config_keys() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["requant.fraction", "router.experts", "side.reduction", "memory.r_sweep", "train.lr"] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn shipped_config_is_the_default() {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.toml")).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
}
