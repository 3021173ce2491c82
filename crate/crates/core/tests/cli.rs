use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn falconbc(dir: &Path, args: &[&str]) -> (i32, Value, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_falconbc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    let line = if out.status.success() { &stdout } else { &stderr };
    let v = serde_json::from_str(line.trim()).unwrap_or(Value::Null);
    (out.status.code().unwrap_or(-1), v, stderr)
}

fn write(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}

#[test]
fn gen_data_then_train_and_sample() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    write(p, "gen.json", r#"{"n": 24, "nominal": {"param": "rc2"}, "seed": 4}"#);
    let (code, v, err) = falconbc(p, &["gen-data", "--config", "gen.json", "--out", "data"]);
    assert_eq!(code, 0, "{err}");
    let hash = v["config_hash"].as_str().unwrap().to_string();
    assert_eq!(v["seed"], 4);

    let csv = std::fs::read_to_string(p.join("data/dataset.csv")).unwrap();
    assert!(csv.starts_with(&format!("# config_hash={hash} seed=4")));
    let sidecar: Value = serde_json::from_slice(&std::fs::read(p.join("data/dataset.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config_hash"], hash.as_str());
    let svg = std::fs::read_to_string(p.join("data/hist_R_tot.svg")).unwrap();
    assert!(svg.contains(&hash));
    let manifest: Value = serde_json::from_slice(&std::fs::read(p.join("data/manifest.json")).unwrap()).unwrap();
    assert!(manifest["artifacts"].as_array().unwrap().iter().any(|a| a == "dataset.csv"));

    // same config and seed, same bytes
    let (code, _, _) = falconbc(p, &["gen-data", "--config", "gen.json", "--out", "again"]);
    assert_eq!(code, 0);
    assert_eq!(csv, std::fs::read_to_string(p.join("again/dataset.csv")).unwrap());

    // --seed overrides the config seed
    let (_, v, _) = falconbc(p, &["gen-data", "--config", "gen.json", "--out", "s9", "--seed", "9", "--threads", "1"]);
    assert_eq!(v["seed"], 9);
    assert_ne!(csv, std::fs::read_to_string(p.join("s9/dataset.csv")).unwrap());

    write(
        p,
        "train.json",
        r#"{"dataset": "data/dataset.json", "x_columns": ["R_tot", "C_tot"], "y_columns": ["P_dia", "P_sys"],
            "hyper": {"hidden": [8], "epochs": 20, "batch": 8}}"#,
    );
    let (code, _, err) = falconbc(p, &["train-cfm", "--config", "train.json", "--out", "model"]);
    assert_eq!(code, 0, "{err}");
    assert!(p.join("model/loss.svg").exists());

    write(p, "sample.json", r#"{"model": "model/model.json", "n": 20, "observations": [[80, 120]]}"#);
    let (code, _, err) = falconbc(p, &["sample", "--config", "sample.json", "--out", "post"]);
    assert_eq!(code, 0, "{err}");
    let s = std::fs::read_to_string(p.join("post/samples_0.csv")).unwrap();
    assert_eq!(s.lines().filter(|l| !l.starts_with('#')).count(), 21);

    // an almost empty box cannot be filled within the try budget
    write(
        p,
        "tight.json",
        r#"{"model": "model/model.json", "n": 50, "observations": [[80, 120]], "max_tries": 60,
            "bounds": {"lo": [1.0, 1.0], "hi": [1.0000001, 1.0000001]}}"#,
    );
    let (code, v, _) = falconbc(p, &["sample", "--config", "tight.json", "--out", "tight"]);
    assert_eq!(code, 4);
    assert_eq!(v["error"], "rejection_exhausted");
}

#[test]
fn config_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    write(p, "missing.json", r#"{"n": 10}"#);
    let (code, v, _) = falconbc(p, &["gen-data", "--config", "missing.json"]);
    assert_eq!(code, 2);
    assert_eq!(v["error"], "schema_error");
    assert_eq!(v["field"], "nominal");

    write(p, "typo.json", r#"{"n": 10, "nominal": {"param": "rc2", "rel_rnage": 0.2}}"#);
    let (code, v, _) = falconbc(p, &["gen-data", "--config", "typo.json"]);
    assert_eq!(code, 2);
    assert_eq!(v["field"], "nominal.rel_rnage");

    write(p, "broken.json", "{\"n\": ");
    let (code, v, _) = falconbc(p, &["gen-data", "--config", "broken.json"]);
    assert_eq!(code, 2);
    assert_eq!(v["error"], "parse_error");

    let (code, v, _) = falconbc(p, &["gen-data", "--config", "nowhere.json"]);
    assert_eq!(code, 2);
    assert_eq!(v["error"], "parse_error");

    write(p, "range.json", r#"{"n": 10, "nominal": {"param": "rc2", "rel_range": 1.5}}"#);
    let (code, v, _) = falconbc(p, &["gen-data", "--config", "range.json"]);
    assert_eq!(code, 2);
    assert_eq!(v["field"], "nominal.rel_range");
}
