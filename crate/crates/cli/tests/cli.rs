use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn curlgauge(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curlgauge"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, config: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn ladder_model(level: u32) -> Value {
    json!({"kind": "synthetic", "task": {"family": {"kind": "tc-ladder", "level": level}, "positions": 3, "vocab_size": 2, "seed": 5}})
}

#[test]
fn consistency_on_a_bayes_model_file() {
    let dir = tempfile::tempdir().unwrap();
    let gen = write_config(dir.path(), "gen.json", &json!({"model": ladder_model(2)}));
    let out = curlgauge(&["synth-gen", "--config", &gen, "--out", "gen"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = dir.path().join("gen/model.json");
    assert!(model.exists());

    let cfg = write_config(dir.path(), "check.json", &json!({"model": {"kind": "file", "path": "gen/model.json"}}));
    let out = curlgauge(&["consistency", "--config", &cfg, "--out", "check"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("check/report.json"));
    assert_eq!(report["consistency"][0]["report"]["consistent"], json!(true));
    assert_eq!(report["model"]["kind"], json!("bayes"));
    assert_eq!(report["tool_version"], json!(env!("CARGO_PKG_VERSION")));
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn stress_csv_has_one_row_per_context_scheduler_width() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "stress.json",
        &json!({
            "model": {"kind": "synthetic", "task": {"family": {"kind": "tc-ladder", "level": 2}, "positions": 4, "vocab_size": 2, "seed": 1}},
            "contexts": {"kind": "sampled", "count": 2, "observed": 1},
            "diagnostics": {"stress": {
                "widths": [1, 2, 3],
                "schedulers": [{"kind": "left-to-right"}, {"kind": "confidence"}],
                "runs": 20
            }},
            "seed": 9
        }),
    );
    let out = curlgauge(&["stress", "--config", &cfg, "--out", "o", "--format", "json+csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("o/stress.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 3);
    let report = read_json(&dir.path().join("o/report.json"));
    assert_eq!(report["stress"]["rows"].as_array().unwrap().len(), 12);
}

#[test]
fn csv_and_json_views_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({"model": {"kind": "synthetic", "task": {"family": {"kind": "chain", "beta": 1.0}, "positions": 3, "vocab_size": 3, "seed": 2},
                          "perturbation": {"delta": 0.4, "seed": 3}}}),
    );
    let out = curlgauge(&["curl-scan", "--config", &cfg, "--out", "o", "--format", "json+csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("o/report.json"));
    let samples = report["curl_scan"][0]["samples"].as_array().unwrap();
    let mut reader = csv::Reader::from_path(dir.path().join("o/curl_samples.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), samples.len());
    for (row, s) in rows.iter().zip(samples) {
        assert_eq!(row[5].parse::<f64>().unwrap(), s["curl"].as_f64().unwrap());
        assert_eq!(row[6].parse::<f64>().unwrap(), s["normalized"].as_f64().unwrap());
    }
}

#[test]
fn malformed_config_exits_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\"model\": ").unwrap();
    let out = curlgauge(&["tc", "--config", "bad.json", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("o").exists());

    let cfg = write_config(dir.path(), "typo.json", &json!({"model": ladder_model(1), "sed": 4}));
    let out = curlgauge(&["tc", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = curlgauge(&["curl-sacn"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage"));
}

#[test]
fn cap_refusal_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "big.json",
        &json!({"model": {"kind": "synthetic", "task": {"family": {"kind": "exchangeable"}, "positions": 6, "vocab_size": 2, "seed": 0}}}),
    );
    let out = curlgauge(&["consistency", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn training_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "diverge.json",
        &json!({"model": {"kind": "synthetic",
            "task": {"family": {"kind": "chain", "beta": 1.0}, "positions": 3, "vocab_size": 2, "seed": 0},
            "train": {"coverage": {"kind": "prefix-only"}, "steps": 50, "learning_rate": 1e308, "ecirc_weight": 1e308}}}),
    );
    let out = curlgauge(&["train", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_a_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "train.json",
        &json!({"model": {"kind": "synthetic",
            "task": {"family": {"kind": "chain", "beta": 1.0}, "positions": 3, "vocab_size": 2, "seed": 0},
            "train": {"coverage": {"kind": "prefix-only"}, "steps": 200}}}),
    );
    let out = curlgauge(&["train", "--config", &cfg, "--out", "t", "--format", "json+csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("t/report.json"));
    assert!(report["train"]["ecirc_random_mask"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("t/train_history.csv").exists());

    let check = write_config(dir.path(), "check.json", &json!({"model": {"kind": "file", "path": "t/model.json"}}));
    let out = curlgauge(&["tc", "--config", &check, "--out", "c"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_json(&dir.path().join("c/report.json"))["model"]["kind"], json!("trained"));
}

#[test]
fn reruns_are_bit_identical_and_seed_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "r.json",
        &json!({"model": ladder_model(3), "diagnostics": {"stress": {"runs": 30}}, "seed": 1}),
    );
    let strip = |v: &mut Value| {
        v.as_object_mut().unwrap().remove("wall_clock");
    };
    let mut reports = Vec::new();
    for (out_dir, seed) in [("a", None), ("b", None), ("c", Some("2"))] {
        let mut args = vec!["stress", "--config", &cfg, "--out", out_dir];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        let out = curlgauge(&args, dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let mut r = read_json(&dir.path().join(out_dir).join("report.json"));
        strip(&mut r);
        reports.push(r);
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[2]["seed"], json!(2));
    assert_ne!(reports[0]["config_hash"], reports[2]["config_hash"]);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.json", &json!({"model": ladder_model(2), "diagnostics": {"stress": {"runs": 40}}}));
    let mut reports = Vec::new();
    for (out_dir, threads) in [("one", "1"), ("four", "4")] {
        let out = Command::new(env!("CARGO_BIN_EXE_curlgauge"))
            .args(["stress", "--config", &cfg, "--out", out_dir])
            .env("CURLGAUGE_THREADS", threads)
            .current_dir(dir.path())
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let mut r = read_json(&dir.path().join(out_dir).join("report.json"));
        r.as_object_mut().unwrap().remove("wall_clock");
        reports.push(r);
    }
    assert_eq!(reports[0], reports[1]);
}
