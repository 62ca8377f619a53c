use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rankloss::formats::load_model;
use rankloss::report::{rank_curve_from_csv, report_from_json};

fn rankloss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankloss"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rankloss(args);
    assert!(
        out.status.success(),
        "rankloss {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = rankloss(args);
    assert!(
        !out.status.success(),
        "rankloss {args:?} unexpectedly succeeded"
    );
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small trained classifier plus its data, built through the CLI.
struct Toy {
    dir: tempfile::TempDir,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data.csv");
        let model_dir = dir.path().join("model");
        ok(&[
            "gen-data",
            "--spec",
            "blobs:3classes:200:4dims",
            "--seed",
            "3",
            "--out",
            s(&data),
        ]);
        ok(&[
            "train-toy",
            "--arch",
            "4,24,3",
            "--data",
            s(&data),
            "--steps",
            "150",
            "--lr",
            "0.1",
            "--seed",
            "9",
            "--out",
            s(&model_dir),
        ]);
        Toy { dir }
    }

    fn data(&self) -> PathBuf {
        self.dir.path().join("data.csv")
    }

    fn model(&self) -> PathBuf {
        self.dir.path().join("model/model.json")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn compress_writes_model_report_and_curves() {
    let toy = Toy::new();
    let out = toy.out("run");
    ok(&[
        "compress",
        "--model",
        s(&toy.model()),
        "--data",
        s(&toy.data()),
        "--holdout",
        s(&toy.data()),
        "--mode",
        "compact",
        "--eps",
        "0.05",
        "--curves",
        "--format",
        "csv",
        "--out",
        s(&out),
    ]);
    let report =
        report_from_json(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report.holdout.is_some());
    let compressed = load_model(&out.join("compressed_model.json")).unwrap();
    assert_eq!(compressed.param_count(), report.totals.compressed_params);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + report.layers.len());
    for l in &report.layers {
        let text =
            std::fs::read_to_string(out.join(format!("curves/layer_{}.csv", l.layer))).unwrap();
        let points = rank_curve_from_csv(&text).unwrap();
        assert!(!points.is_empty());
        assert!(points.iter().all(|p| p.layer == l.layer));
    }
}

#[test]
fn nothing_to_compress_still_succeeds() {
    let toy = Toy::new();
    let out = toy.out("tight");
    let stdout = ok(&[
        "compress",
        "--model",
        s(&toy.model()),
        "--data",
        s(&toy.data()),
        "--eps",
        "1e-9",
        "--out",
        s(&out),
        "--json",
    ]);
    let report = report_from_json(&stdout).unwrap();
    assert_eq!(report.factorized_layers(), 0);
    assert_eq!(report.totals.drop_rate, 0.0);
    assert_eq!(
        stdout,
        std::fs::read_to_string(out.join("report.json")).unwrap()
    );
}

#[test]
fn config_file_and_flag_override() {
    let toy = Toy::new();
    let cfg = toy.out("c.toml");
    std::fs::write(&cfg, "mode = \"compact\"\nepsilon = 0.05\n").unwrap();
    let (model, data) = (toy.model(), toy.data());
    let base = [
        "compress",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--config",
        s(&cfg),
    ];
    let a = report_from_json(&ok(
        &[&base[..], &["--out", s(&toy.out("a")), "--json"]].concat()
    ))
    .unwrap();
    assert_eq!(a.config.mode, rankloss::Mode::Compact);
    let b = report_from_json(&ok(&[
        &base[..],
        &["--mode", "lossless", "--out", s(&toy.out("b")), "--json"],
    ]
    .concat()))
    .unwrap();
    assert_eq!(b.config.mode, rankloss::Mode::Lossless);

    std::fs::write(&cfg, "mode = \"compact\"\nspeed = 3\n").unwrap();
    let err = fails(&[&base[..], &["--out", s(&toy.out("c"))]].concat());
    assert!(err.contains("c.toml"), "{err}");
}

#[test]
fn thread_count_does_not_change_results() {
    let toy = Toy::new();
    let args = |out: &str| {
        vec![
            "compress".to_string(),
            "--model".into(),
            s(&toy.model()).into(),
            "--data".into(),
            s(&toy.data()).into(),
            "--out".into(),
            s(&toy.out(out)).into(),
            "--json".into(),
        ]
    };
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_rankloss"))
            .args(args(out))
            .env("RANKLOSS_THREADS", threads)
            .output()
            .unwrap();
        (o.status.success(), String::from_utf8(o.stdout).unwrap())
    };
    let (ok1, one) = run("1", "t1");
    let (ok4, four) = run("4", "t4");
    assert!(ok1 && ok4);
    assert_eq!(one, four);
    assert!(!run("zero", "tz").0);
}

#[test]
fn calibrate_probe_and_eval() {
    let toy = Toy::new();
    let (m, d) = (toy.model(), toy.data());
    let profile: serde_json::Value = serde_json::from_str(&ok(&[
        "calibrate",
        "--model",
        s(&m),
        "--data",
        s(&d),
        "--json",
    ]))
    .unwrap();
    assert_eq!(profile["layers"].as_array().unwrap().len(), 2);

    let dir = toy.out("probe");
    ok(&[
        "probe",
        "--model",
        s(&m),
        "--data",
        s(&d),
        "--layers",
        "0",
        "--out",
        s(&dir),
    ]);
    let probe: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("probe.json")).unwrap()).unwrap();
    assert_eq!(probe["layers"].as_array().unwrap().len(), 1);
    assert!(probe["gradient_stats"]["entries"].as_u64().unwrap() > 0);
    let all: serde_json::Value = serde_json::from_str(&ok(&[
        "probe",
        "--model",
        s(&m),
        "--data",
        s(&d),
        "--all-ranks",
        "--json",
    ]))
    .unwrap();
    // rank 1..=3 of a 24x4 layer, every proper rank regardless of compression
    assert_eq!(all["layers"][0]["records"].as_array().unwrap().len(), 3);
    assert!(std::fs::read_to_string(dir.join("probe.csv"))
        .unwrap()
        .starts_with("layer,eps_bound,rank"));

    let eval: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--model", s(&m), "--data", s(&d), "--json"])).unwrap();
    assert_eq!(eval["metrics"]["samples"], 200);
    assert!(eval["metrics"]["top1"].as_f64().unwrap() > 0.8);
    let err = fails(&["probe", "--model", s(&m), "--data", s(&d), "--layers", "7"]);
    assert!(err.contains('7'), "{err}");
}

#[test]
fn train_toy_generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "train-toy",
            "--arch",
            "8,6,3",
            "--generate",
            "blobs:3classes:60",
            "--steps",
            "20",
            "--seed",
            "4",
            "--out",
            s(&out),
        ]);
        assert!(out.join("train.csv").exists() && out.join("model.meta.json").exists());
        std::fs::read(out.join("model.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn failures_name_the_offending_input() {
    let toy = Toy::new();
    let out = toy.out("x");
    let err = fails(&[
        "compress",
        "--model",
        "/no/such/model.json",
        "--data",
        s(&toy.data()),
        "--out",
        s(&out),
    ]);
    assert!(err.contains("/no/such/model.json"), "{err}");
    assert!(!out.exists(), "no output before inputs are validated");

    let bad = toy.out("bad.json");
    std::fs::write(&bad, "{\"format_version\": 1}").unwrap();
    let err = fails(&["eval", "--model", s(&bad), "--data", s(&toy.data())]);
    assert!(err.contains("bad.json"), "{err}");

    let err = fails(&[
        "compress",
        "--model",
        s(&toy.model()),
        "--data",
        s(&toy.data()),
        "--eps",
        "-1",
        "--out",
        s(&out),
    ]);
    assert!(err.contains("eps") || err.contains("epsilon"), "{err}");

    let wrong = toy.out("wrong.csv");
    ok(&[
        "gen-data",
        "--spec",
        "blobs:3classes:10:5dims",
        "--seed",
        "1",
        "--out",
        s(&wrong),
    ]);
    fails(&["eval", "--model", s(&toy.model()), "--data", s(&wrong)]);
    fails(&[
        "train-toy",
        "--arch",
        "4,3",
        "--generate",
        "blobs:3classes:10",
        "--out",
        s(&out),
    ]);
}
