use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_cohort-agent");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small two-cohort dataset, fast to index and evaluate.
fn small_dataset(dir: &Path) {
    ok(&[
        "generate",
        "--out",
        s(dir),
        "--preset",
        "separation",
        "--cohorts",
        "2",
        "--per-cohort",
        "60",
        "--seed",
        "4",
    ]);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["build-index", "--metric", "manhattan"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "build-index",
        "--data",
        s(&tmp.path().join("missing")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn generate_index_retrieve_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let index = tmp.path().join("index");
    small_dataset(&data);
    for f in [
        "records.jsonl",
        "features.cafv",
        "schema.json",
        "table.csv",
        "registry.json",
    ] {
        assert!(data.join(f).exists(), "{f} missing");
    }

    let built: Value = serde_json::from_str(&ok(&["build-index", "--data", s(&data), "--out", s(&index)])).unwrap();
    // 60 per cohort, 18 held out from each.
    assert_eq!(built["entries"], 84);
    assert_eq!(built["metric"], "cosine");

    let retrieved: Value = serde_json::from_str(&ok(&[
        "retrieve",
        "--data",
        s(&data),
        "--index",
        s(&index),
        "--patient-id",
        "C1-0007",
        "--k",
        "5",
    ]))
    .unwrap();
    assert_eq!(retrieved["cohort"], "C1");
    assert_eq!(retrieved["true_cohort"], "C1");
    assert_eq!(retrieved["neighbors"].as_array().unwrap().len(), 5);

    let all = ok(&["retrieve", "--data", s(&data), "--index", s(&index)]);
    let lines: Vec<Value> = all.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 36);
    assert!(lines.iter().all(|l| l["cohort"] == l["true_cohort"]));

    let line = ok(&[
        "predict",
        "--data",
        s(&data),
        "--index",
        s(&index),
        "--patient-id",
        "C0-0003",
    ]);
    let p: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(p["patient_id"], "C0-0003");
    assert_eq!(p["cohort"], "C0");
    // C0 plants DLI above DLS.
    assert_eq!(p["model"], "DLI");
    let prob = p["probability"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&prob));
    assert_eq!(p["neighbor_ids"].as_array().unwrap().len(), 15);

    // Same inputs, same bytes.
    assert_eq!(
        line,
        ok(&[
            "predict",
            "--data",
            s(&data),
            "--index",
            s(&index),
            "--patient-id",
            "C0-0003"
        ])
    );

    let missing = run(&[
        "predict",
        "--data",
        s(&data),
        "--index",
        s(&index),
        "--patient-id",
        "nobody",
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let config = tmp.path().join("run.toml");
    fs::write(
        &config,
        format!(
            "data = {:?}\nmetric = \"l2\"\n\n[split]\nholdout_fraction = 0.5\n",
            s(&data)
        ),
    )
    .unwrap();

    let a: Value = serde_json::from_str(&ok(&[
        "--config",
        s(&config),
        "build-index",
        "--out",
        s(&tmp.path().join("a")),
    ]))
    .unwrap();
    assert_eq!(a["metric"], "l2");
    assert_eq!(a["entries"], 60);

    let b: Value = serde_json::from_str(&ok(&[
        "--config",
        s(&config),
        "build-index",
        "--out",
        s(&tmp.path().join("b")),
        "--metric",
        "cosine",
        "--holdout",
        "0",
    ]))
    .unwrap();
    assert_eq!(b["metric"], "cosine");
    assert_eq!(b["entries"], 120);

    fs::write(&config, "nonsense = 1\n").unwrap();
    assert_eq!(run(&["--config", s(&config), "build-index"]).status.code(), Some(1));
}

fn write_ingest_inputs(dir: &Path, records: &str) -> [String; 3] {
    let src = dir.join("src");
    small_dataset(&src);
    let records_path = dir.join("records.jsonl");
    fs::write(&records_path, records).unwrap();
    [
        s(&records_path).to_string(),
        s(&src.join("features.cafv")).to_string(),
        s(&src.join("schema.json")).to_string(),
    ]
}

fn record_line(id: &str, feature_ref: usize, extra: &str) -> String {
    format!(
        r#"{{"patient_id":"{id}","cohort":"C0","metadata":{{"age":61.0,"bmi":25.0,"pack_years":30.0,"gender":"male","smoking_status":"former"}},"label":1,"feature_ref":{feature_ref}{extra}}}"#
    ) + "\n"
}

fn ingest(paths: &[String; 3], extra: &[&str]) -> Output {
    let mut args = vec![
        "ingest",
        "--records",
        &paths[0],
        "--features",
        &paths[1],
        "--schema",
        &paths[2],
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn ingest_validates_and_summarizes() {
    let tmp = tempfile::tempdir().unwrap();
    let paths = write_ingest_inputs(tmp.path(), &(record_line("a", 0, "") + &record_line("b", 1, "")));
    let out = ingest(&paths, &["--out", s(&tmp.path().join("clean"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["records"], 2);
    assert_eq!(summary["positives"], 2);
    assert!(tmp.path().join("clean/records.jsonl").exists());
}

#[test]
fn ingest_rejects_dangling_and_duplicate_records() {
    let tmp = tempfile::tempdir().unwrap();
    let dangling = write_ingest_inputs(tmp.path(), &record_line("a", 100_000, ""));
    let out = ingest(&dangling, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("100000"));

    let dup = tmp.path().join("dup.jsonl");
    fs::write(&dup, record_line("a", 0, "") + &record_line("a", 1, "")).unwrap();
    let paths = [s(&dup).to_string(), dangling[1].clone(), dangling[2].clone()];
    let out = ingest(&paths, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate patient_id a"));
}

#[test]
fn unknown_record_fields_need_lenient_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let paths = write_ingest_inputs(tmp.path(), &record_line("a", 0, r#","scanner":"x""#));
    assert_eq!(ingest(&paths, &[]).status.code(), Some(1));
    assert!(ingest(&paths, &["--lenient"]).status.success());
}

#[test]
fn evaluate_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out_dir = tmp.path().join("reports");
    ok(&[
        "generate",
        "--out",
        s(&data),
        "--preset",
        "separation",
        "--cohorts",
        "3",
        "--per-cohort",
        "80",
        "--seed",
        "2",
    ]);
    let printed = ok(&[
        "evaluate",
        "--data",
        s(&data),
        "--out",
        s(&out_dir),
        "--strategy",
        "single:DLI,per_cohort_best",
        "--strategy",
        "retrieval",
        "--resamples",
        "50",
        "--seed",
        "2",
    ]);
    assert!(printed.starts_with("seed 2"));
    assert!(printed.contains("retrieval - per_cohort_best"));
    for f in [
        "report-single-DLI.json",
        "report-per_cohort_best.json",
        "report-retrieval.json",
        "comparison.txt",
        "confusion.txt",
        "summary.json",
    ] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report-retrieval.json")).unwrap()).unwrap();
    assert_eq!(report["cohorts"].as_array().unwrap().len(), 3);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 2);

    let bad = run(&[
        "evaluate",
        "--data",
        s(&data),
        "--out",
        s(&out_dir),
        "--strategy",
        "everything",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}
