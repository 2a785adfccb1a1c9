use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_runtime-oracle");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("RUNTIME_ORACLE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_NET: &[&str] = &[
    "--hidden-sizes",
    "8",
    "--embed-dim",
    "3",
    "--batch-per-mode",
    "16",
    "--eval-every",
    "10",
    "--steps",
    "20",
];

/// Dataset and split in `dir/data` and `dir/split`.
fn prepare(dir: &Path) {
    ok(
        dir,
        &[
            "synth",
            "--out",
            "data",
            "--n-workloads",
            "8",
            "--n-platforms",
            "5",
            "--obs-per-mode",
            "120",
            "--seed",
            "3",
        ],
    );
    ok(
        dir,
        &[
            "split",
            "--data",
            "data",
            "--out",
            "split",
            "--train-fraction",
            "0.7",
            "--seed",
            "3",
        ],
    );
}

fn train(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--data",
        "data",
        "--split",
        "split/split.json",
        "--out",
        out,
        "--seed",
        "5",
    ];
    args.extend_from_slice(SMALL_NET);
    args.extend_from_slice(extra);
    ok(dir, &args);
}

fn files_equal(a: &Path, b: &Path) {
    for entry in fs::read_dir(a).unwrap() {
        let name = entry.unwrap().file_name();
        let (x, y) = (fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
        assert!(x == y, "{} differs", name.to_string_lossy());
    }
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    for out in ["a", "b"] {
        ok(
            tmp.path(),
            &[
                "synth",
                "--n-workloads",
                "20",
                "--n-platforms",
                "10",
                "--seed",
                "7",
                "--out",
                out,
            ],
        );
    }
    files_equal(&tmp.path().join("a"), &tmp.path().join("b"));
    assert!(tmp.path().join("a/oracle.json").is_file());
    assert!(tmp.path().join("a/manifest.json").is_file());
}

#[test]
fn negative_noise_exits_2_naming_the_flag() {
    let tmp = TempDir::new().unwrap();
    let out = run(tmp.path(), &["synth", "--out", "d", "--noise-sigma", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--noise-sigma"), "{}", stderr(&out));
    assert!(!tmp.path().join("d").exists());
}

#[test]
fn missing_dataset_exits_2_before_writing() {
    let tmp = TempDir::new().unwrap();
    let out = run(
        tmp.path(),
        &["train", "--data", "nowhere", "--split", "s.json", "--out", "m"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere"));
    assert!(!tmp.path().join("m").exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("run.toml"), "[network]\nembed_dims = 4\n").unwrap();
    let out = run(tmp.path(), &["--config", "run.toml", "synth", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("embed_dims"));
}

#[test]
fn synth_defaults_feed_train() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["synth", "--out", "data", "--obs-per-mode", "40"]);
    ok(tmp.path(), &["split", "--data", "data", "--out", "split"]);
    train(tmp.path(), "m", &["--steps", "5", "--mode", "mean"]);
    assert!(tmp.path().join("m/best.json").is_file());
}

#[test]
fn train_twice_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    prepare(tmp.path());
    train(tmp.path(), "a", &[]);
    train(tmp.path(), "b", &[]);
    let names = [
        "best.json",
        "final.json",
        "training_log.csv",
        "baseline.json",
        "manifest.json",
    ];
    for n in names {
        assert!(tmp.path().join("a").join(n).is_file(), "{n} missing");
    }
    files_equal(&tmp.path().join("a"), &tmp.path().join("b"));
}

#[test]
fn zero_steps_keeps_initialization() {
    let tmp = TempDir::new().unwrap();
    prepare(tmp.path());
    train(tmp.path(), "m", &["--steps", "0"]);
    let best = fs::read(tmp.path().join("m/best.json")).unwrap();
    let last = fs::read(tmp.path().join("m/final.json")).unwrap();
    assert_eq!(best, last);
    let log = fs::read_to_string(tmp.path().join("m/training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "{log}");
    assert!(log.lines().nth(1).unwrap().starts_with("0,"));
}

fn head_count(model: &Path) -> usize {
    let m = runtime_oracle::model::load_model(model).unwrap();
    assert_eq!(m.params.workload_net.output_dim(), m.heads() * m.config.embed_dim);
    m.heads()
}

#[test]
fn mean_and_quantile_modes_differ_in_heads() {
    let tmp = TempDir::new().unwrap();
    prepare(tmp.path());
    train(tmp.path(), "mean", &["--mode", "mean", "--steps", "2"]);
    train(tmp.path(), "quant", &["--mode", "quantile", "--steps", "2"]);
    assert_eq!(head_count(&tmp.path().join("mean/best.json")), 1);
    assert_eq!(head_count(&tmp.path().join("quant/best.json")), 8);
}

#[test]
fn calibrate_rejects_mean_model() {
    let tmp = TempDir::new().unwrap();
    prepare(tmp.path());
    train(tmp.path(), "mean", &["--mode", "mean", "--steps", "2"]);
    let out = run(
        tmp.path(),
        &[
            "calibrate",
            "--model",
            "mean/best.json",
            "--data",
            "data",
            "--split",
            "split/split.json",
            "--out",
            "c",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("quantile-mode model required"));
}

#[test]
fn evaluate_reports_margin_and_coverage() {
    let tmp = TempDir::new().unwrap();
    prepare(tmp.path());
    train(tmp.path(), "q", &["--quantiles", "0.5,0.9"]);
    ok(
        tmp.path(),
        &[
            "calibrate",
            "--model",
            "q/best.json",
            "--data",
            "data",
            "--split",
            "split/split.json",
            "--out",
            "c",
            "--epsilon",
            "0.2,0.05",
        ],
    );
    ok(
        tmp.path(),
        &[
            "evaluate",
            "--model",
            "q/best.json",
            "--calibration",
            "c/calibration.json",
            "--data",
            "data",
            "--split",
            "split/split.json",
            "--out",
            "ev",
            "--epsilon",
            "0.05",
        ],
    );
    let text = fs::read_to_string(tmp.path().join("ev/evaluation.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let bounds = v["bounds"].as_array().unwrap();
    let all = bounds.iter().find(|b| b["pool"] == "all").unwrap();
    assert_eq!(all["epsilon"].as_f64(), Some(0.05));
    assert!(all["margin"].is_number(), "{all}");
    assert!(all["coverage"].is_number(), "{all}");
}

#[test]
fn evaluate_rejects_uncalibrated_epsilon() {
    let tmp = TempDir::new().unwrap();
    prepare(tmp.path());
    train(tmp.path(), "q", &["--quantiles", "0.5,0.9", "--steps", "2"]);
    ok(
        tmp.path(),
        &[
            "calibrate",
            "--model",
            "q/best.json",
            "--data",
            "data",
            "--split",
            "split/split.json",
            "--out",
            "c",
            "--epsilon",
            "0.2",
        ],
    );
    let out = run(
        tmp.path(),
        &[
            "evaluate",
            "--model",
            "q/best.json",
            "--calibration",
            "c/calibration.json",
            "--data",
            "data",
            "--split",
            "split/split.json",
            "--out",
            "ev",
            "--epsilon",
            "0.05",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn grid_then_summarize_gives_one_row_per_fraction_and_mode() {
    let tmp = TempDir::new().unwrap();
    prepare(tmp.path());
    let mut args = vec![
        "evaluate",
        "--data",
        "data",
        "--out",
        "grid",
        "--fractions",
        "0.6",
        "--replicates",
        "5",
        "--epsilon",
        "0.2",
        "--quantiles",
        "0.5,0.9",
        "--jobs",
        "2",
    ];
    args.extend_from_slice(SMALL_NET);
    ok(tmp.path(), &args);
    let runs: Vec<String> = (0..5).map(|r| format!("grid/fraction_0.6_replicate_{r}")).collect();
    let mut args = vec!["summarize", "--out", "summary"];
    args.extend(runs.iter().map(String::as_str));
    ok(tmp.path(), &args);
    let csv = fs::read_to_string(tmp.path().join("summary/error_vs_fraction.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{csv}");
    assert!(rows.iter().all(|r| r.starts_with("default,0.6,") && r.ends_with(",5")));
    assert!(tmp.path().join("summary/margin_vs_epsilon.csv").is_file());
}

#[test]
fn grid_is_independent_of_jobs() {
    let tmp = TempDir::new().unwrap();
    prepare(tmp.path());
    for (out, jobs) in [("one", "1"), ("three", "3")] {
        let mut args = vec![
            "evaluate",
            "--data",
            "data",
            "--out",
            out,
            "--fractions",
            "0.5,0.7",
            "--replicates",
            "2",
            "--epsilon",
            "0.2",
            "--quantiles",
            "0.5,0.9",
            "--jobs",
            jobs,
        ];
        args.extend_from_slice(SMALL_NET);
        ok(tmp.path(), &args);
    }
    for f in ["0.5", "0.7"] {
        for r in 0..2 {
            let d = format!("fraction_{f}_replicate_{r}");
            let (a, b) = (tmp.path().join("one").join(&d), tmp.path().join("three").join(&d));
            for n in [
                "report.json",
                "predictions.csv",
                "quantile_model.json",
                "calibration.json",
            ] {
                assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{d}/{n}");
            }
        }
    }
}

#[test]
fn config_file_and_env_seed_precedence() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["synth", "--out", "data", "--obs-per-mode", "30"]);
    let seed_of = |dir: &str| -> u64 {
        let text = fs::read_to_string(tmp.path().join(dir).join("manifest.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["config"]["seed"].as_u64().unwrap()
    };
    let with_env = |args: &[&str]| {
        let out = Command::new(BIN)
            .args(args)
            .current_dir(tmp.path())
            .env("RUNTIME_ORACLE_SEED", "11")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
    };
    fs::write(tmp.path().join("run.toml"), "seed = 4\n[split]\ntrain_fraction = 0.3\n").unwrap();
    with_env(&["split", "--data", "data", "--out", "env"]);
    with_env(&["--config", "run.toml", "split", "--data", "data", "--out", "file"]);
    with_env(&[
        "--config", "run.toml", "split", "--data", "data", "--out", "flag", "--seed", "2",
    ]);
    assert_eq!(seed_of("env"), 11);
    assert_eq!(seed_of("file"), 4);
    assert_eq!(seed_of("flag"), 2);
    let split = runtime_oracle::dataset::load_split(tmp.path().join("file/split.json")).unwrap();
    assert_eq!(split.train_fraction, 0.3);
}

#[test]
fn export_writes_embedding_tables() {
    let tmp = TempDir::new().unwrap();
    prepare(tmp.path());
    train(tmp.path(), "q", &["--steps", "2", "--interference-types", "1"]);
    ok(
        tmp.path(),
        &[
            "export-embeddings",
            "--model",
            "q/best.json",
            "--data",
            "data",
            "--out",
            "emb",
        ],
    );
    let norms = fs::read_to_string(tmp.path().join("emb/interference_norms.csv")).unwrap();
    assert_eq!(norms.lines().count(), 1 + 5);
    let platforms = fs::read_to_string(tmp.path().join("emb/platform_embeddings.csv")).unwrap();
    assert!(platforms.starts_with("platform,p_0,p_1,p_2,vs0_0"));
}

#[test]
fn help_lists_defaults() {
    let out = Command::new(BIN).args(["train", "--help"]).output().unwrap();
    let help = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "[default: 20000]",
        "[default: 512]",
        "[default: 32]",
        "[default: 128 128]",
        "[default: quantile]",
    ] {
        assert!(help.contains(needle), "missing {needle}");
    }
}
