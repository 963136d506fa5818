use std::path::Path;
use std::process::{Command, Output};

use dtm::data::{load_csv, TargetColumn, ToyGenerator};
use serde_json::Value;

fn dtm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dtm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_toy_is_deterministic_and_handles_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let stdout = ok(&[
        "gen-toy",
        "--name",
        "sinusoidal",
        "--n",
        "1000",
        "--seed",
        "1",
        "--out",
        s(&a),
    ]);
    assert!(stdout.contains("Exp(1)"));
    ok(&[
        "gen-toy",
        "--name",
        "sinusoidal",
        "--n",
        "1000",
        "--seed",
        "1",
        "--out",
        s(&b),
    ]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 1001);

    let empty = dir.path().join("empty.csv");
    ok(&[
        "gen-toy",
        "--name",
        "bimodal",
        "--n",
        "0",
        "--out",
        s(&empty),
    ]);
    assert_eq!(std::fs::read_to_string(&empty).unwrap().trim(), "x,y");
    let d = load_csv(&empty, &TargetColumn::Last);
    assert!(d.is_err() || d.unwrap().is_empty());

    let out = dtm(&[
        "gen-toy",
        "--name",
        "spiral",
        "--out",
        s(&dir.path().join("c.csv")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("c.csv").exists());
}

#[test]
fn gen_toy_bimodal_has_zero_conditional_mean() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bimodal.csv");
    ok(&[
        "gen-toy",
        "--name",
        "bimodal",
        "--n",
        "100000",
        "--seed",
        "3",
        "--out",
        s(&path),
    ]);
    let d = load_csv(&path, &TargetColumn::from("y")).unwrap();
    let mut sums = [0.0; 5];
    let mut counts = [0usize; 5];
    for i in 0..d.len() {
        let bin = (d.x.get(i, 0) as usize).min(4);
        sums[bin] += d.y[i];
        counts[bin] += 1;
    }
    for bin in 0..5 {
        assert!((sums[bin] / counts[bin] as f64).abs() < 0.05);
    }
}

#[test]
fn train_then_evaluate_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let stdout = ok(&[
            "train",
            "--set",
            "data.toy=heteroscedastic",
            "--set",
            "data.n=300",
            "--set",
            "model.order=5",
            "--set",
            "model.hidden_layers=[10]",
            "--set",
            "train.iterations=200",
            "--seed",
            "7",
            "--out",
            s(&out),
        ]);
        (out, serde_json::from_str::<Value>(&stdout).unwrap())
    };
    let (out, first) = run("a");
    let (_, second) = run("b");
    assert_eq!(first["final_train_nll"], second["final_train_nll"]);
    for f in ["checkpoint.json", "train_log.ndjson", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["model"]["seed"], 7);
    assert_eq!(manifest["config"]["train"]["l2"], 0.01);
    assert_eq!(manifest["content_hash"].as_str().unwrap().len(), 64);

    // score the same rows through a CSV copy of the toy data
    let csv = dir.path().join("h.csv");
    ok(&[
        "gen-toy",
        "--name",
        "heteroscedastic",
        "--n",
        "300",
        "--seed",
        "0",
        "--out",
        s(&csv),
    ]);
    let report: Value = serde_json::from_str(&ok(&[
        "evaluate",
        "--checkpoint",
        s(&out.join("checkpoint.json")),
        "--data",
        s(&csv),
        "--target",
        "y",
    ]))
    .unwrap();
    let scored = report["mean_test_nll"].as_f64().unwrap();
    let trained = first["final_train_nll"].as_f64().unwrap();
    assert!((scored - trained).abs() < 1e-9, "{scored} vs {trained}");

    let eval_out = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--checkpoint",
        s(&out.join("checkpoint.json")),
        "--data",
        s(&csv),
        "--target",
        "y",
        "--set",
        "folds.n_folds=3",
        "--out",
        s(&eval_out),
    ]);
    let report = read_json(&eval_out.join("report.json"));
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);
    let manifest = read_json(&eval_out.join("manifest.json"));
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn invalid_configs_list_every_problem_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(
        &config,
        r#"{"data": {"toy": "spiral"}, "model": {"order": 0}, "train": {"learning_rate": 0}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let r = dtm(&["train", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code(&r), 2);
    let stderr = String::from_utf8_lossy(&r.stderr);
    for needle in ["data.toy", "model.order", "train.learning_rate"] {
        assert!(stderr.contains(needle), "{needle} missing from {stderr}");
    }
    assert!(!out.exists());

    let r = dtm(&[
        "train",
        "--set",
        "data.toy=bimodal",
        "--set",
        "modle.order=3",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 2);
    let r = dtm(&[
        "train",
        "--set",
        "data.path=/nonexistent.csv",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 2);
    let r = dtm(&["train", "--set", "data.toy=bimodal"]);
    assert_eq!(code(&r), 2);
    assert!(!out.exists());
}

#[test]
fn data_errors_and_divergence_have_their_own_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "a,y\n1,2\nx,3\n").unwrap();
    let out = dir.path().join("out");
    let r = dtm(&[
        "train",
        "--set",
        &format!("data.path={}", s(&csv)),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 3);
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 3"));
    assert!(!out.exists());

    let r = dtm(&[
        "train",
        "--set",
        "data.toy=heteroscedastic",
        "--set",
        "data.n=100",
        "--set",
        "train.learning_rate=1e200",
        "--set",
        "train.log_every=1",
        "--set",
        "train.iterations=100",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 4, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!out.join("checkpoint.json").exists());
}

#[test]
fn benchmark_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bench.json");
    std::fs::write(
        &config,
        r#"{
            "data": {"toy": "heteroscedastic", "n": 200, "seed": 2},
            "model": {"order": 4, "hidden_layers": [8]},
            "train": {"iterations": 150, "log_every": 50},
            "folds": {"n_folds": 3, "seed": 1}
        }"#,
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&["benchmark", "--config", s(&config), "--out", s(&a)]);
    assert!(stdout.contains("over 3 folds"));
    ok(&[
        "benchmark",
        "--config",
        s(&config),
        "--out",
        s(&b),
        "--jobs",
        "2",
    ]);
    let ra = std::fs::read_to_string(a.join("report.json")).unwrap();
    assert_eq!(ra, std::fs::read_to_string(b.join("report.json")).unwrap());
    let report: Value = serde_json::from_str(&ra).unwrap();
    assert_eq!(report["n_failed"], 0);
    assert_eq!(report["train_config"]["l2"], 0.01);

    // externally supplied folds take precedence
    let folds = dir.path().join("folds.txt");
    std::fs::write(
        &folds,
        "0 1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16 17 18 19\n",
    )
    .unwrap();
    let c = dir.path().join("c");
    ok(&[
        "benchmark",
        "--config",
        s(&config),
        "--out",
        s(&c),
        "--folds-dir",
        s(&folds),
    ]);
    let report = read_json(&c.join("report.json"));
    assert_eq!(report["folds"].as_array().unwrap().len(), 1);
    assert_eq!(report["folds"][0]["test_rows"], 20);
    let manifest = read_json(&c.join("manifest.json"));
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    std::fs::write(&folds, "3 200\n").unwrap();
    let r = dtm(&[
        "benchmark",
        "--config",
        s(&config),
        "--out",
        s(&dir.path().join("d")),
        "--folds-dir",
        s(&folds),
    ]);
    assert_eq!(code(&r), 3);
    assert!(String::from_utf8_lossy(&r.stderr).contains("0..199"));
}

#[test]
fn grad_check_passes_on_a_fresh_model() {
    for order in ["1", "10"] {
        let stdout = ok(&[
            "grad-check",
            "--set",
            "data.toy=sinusoidal",
            "--set",
            "data.n=50",
            "--set",
            &format!("model.order={order}"),
            "--set",
            "model.hidden_layers=[5]",
        ]);
        let v: Value = serde_json::from_str(&stdout).unwrap();
        assert_eq!(v["pass"], true);
        assert!(v["report"]["max_rel_error"].as_f64().unwrap() < 1e-5);
    }
}

#[test]
fn heteroscedastic_order_one_model_matches_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m1");
    ok(&[
        "train",
        "--set",
        "data.toy=heteroscedastic",
        "--set",
        "data.n=2000",
        "--set",
        "data.seed=41",
        "--set",
        "model.order=1",
        "--set",
        "train.iterations=3000",
        "--seed",
        "4",
        "--out",
        s(&out),
    ]);
    let test = dir.path().join("test.csv");
    ok(&[
        "gen-toy",
        "--name",
        "heteroscedastic",
        "--n",
        "2000",
        "--seed",
        "42",
        "--out",
        s(&test),
    ]);
    let report: Value = serde_json::from_str(&ok(&[
        "evaluate",
        "--checkpoint",
        s(&out.join("checkpoint.json")),
        "--data",
        s(&test),
    ]))
    .unwrap();
    let nll = report["mean_test_nll"].as_f64().unwrap();
    let oracle = ToyGenerator::Heteroscedastic.nll(&load_csv(&test, &TargetColumn::Last).unwrap());
    assert!((nll - oracle).abs() < 0.05, "{nll} vs {oracle}");
}

#[test]
fn predict_cpd_finds_both_bimodal_modes() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    ok(&[
        "train",
        "--set",
        "data.toy=bimodal",
        "--set",
        "data.n=2000",
        "--set",
        "model.order=12",
        "--set",
        "model.hidden_layers=[20]",
        "--set",
        "train.iterations=1500",
        "--out",
        s(&model),
    ]);
    let checkpoint = model.join("checkpoint.json");
    let cpd = dir.path().join("cpd");
    let stdout = ok(&[
        "predict-cpd",
        "--checkpoint",
        s(&checkpoint),
        "--x",
        "4",
        "--x",
        "1",
        "--quantiles",
        "0.1,0.5,0.9",
        "--out",
        s(&cpd),
    ]);
    let summary: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary[0]["modes"].as_array().unwrap().len(), 2);
    let text = std::fs::read_to_string(cpd.join("cpd_000.csv")).unwrap();
    assert_eq!(text.lines().count(), 513);
    let sidecar = read_json(&cpd.join("cpd_001.json"));
    assert_eq!(sidecar["quantiles"].as_array().unwrap().len(), 3);
    assert_eq!(sidecar["x"][0], 1.0);

    let bad = dir.path().join("bad");
    let r = dtm(&[
        "predict-cpd",
        "--checkpoint",
        s(&checkpoint),
        "--x",
        "1,2",
        "--x",
        "abc",
        "--quantiles",
        "0,0.5",
        "--out",
        s(&bad),
    ]);
    assert_eq!(code(&r), 2);
    assert!(!bad.exists());
    let r = dtm(&[
        "predict-cpd",
        "--checkpoint",
        s(&checkpoint),
        "--x",
        "1,2",
        "--out",
        s(&bad),
    ]);
    assert_eq!(code(&r), 3);
    assert!(!bad.exists());
    let r = dtm(&[
        "predict-cpd",
        "--checkpoint",
        s(&dir.path().join("none.json")),
        "--x",
        "1",
        "--out",
        s(&bad),
    ]);
    assert_eq!(code(&r), 3);
}
