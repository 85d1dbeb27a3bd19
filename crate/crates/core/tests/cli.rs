use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use srmkit::dataio::{save_matrix, Dtype};
use srmkit::Matrix;

fn srmkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srmkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), stderr(&out));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset plus a partition atlas with `c` parcels.
fn dataset(root: &Path, sigma: &str, m: &str, c: usize) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    ok(srmkit(&[
        "synth", "--n", "3", "--m", m, "--t", "15", "--v", "60", "--k", "3", "--sigma", sigma, "--seed", "5",
        "--out", s(&data),
    ]));
    let atlas = root.join("atlas.srmb");
    let labels = Matrix::from_fn(1, 60, |_, x| (x % c) as f64);
    save_matrix(&atlas, &labels, Dtype::F64).unwrap();
    (data.join("manifest.json"), atlas)
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn load_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn schema(name: &str) -> jsonschema::JSONSchema {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas").join(name);
    let schema = load_json(&path);
    jsonschema::JSONSchema::compile(&schema).expect("schema compiles")
}

fn assert_valid(schema: &jsonschema::JSONSchema, doc: &Value) {
    if let Err(errors) = schema.validate(doc) {
        let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("document does not match schema: {msgs:?}");
    }
}

#[test]
fn fastsrm_without_atlas_is_a_usage_error() {
    let root = tempfile::tempdir().unwrap();
    let (manifest, _) = dataset(root.path(), "0.5", "3", 20);
    let out = srmkit(&["fit", "--algo", "fastsrm", "--manifest", s(&manifest), "--k", "3", "--out", s(&root.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--atlas"), "{}", stderr(&out));
    assert!(!root.path().join("m").exists());
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(srmkit(&[]).status.code(), Some(2));
    assert_eq!(srmkit(&["fit", "--algo", "nosuch"]).status.code(), Some(2));
    let out = srmkit(&["synth", "--n", "2", "--m", "3", "--t", "5,5", "--v", "10", "--k", "2", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identical_invocations_give_identical_model_directories() {
    let root = tempfile::tempdir().unwrap();
    let (manifest, atlas) = dataset(root.path(), "0.5", "3", 20);
    for algo in ["detsrm", "probsrm", "fastsrm"] {
        let mut dirs = Vec::new();
        for (tag, jobs) in [("a", "1"), ("b", "1"), ("c", "4")] {
            let out = root.path().join(format!("{algo}-{tag}"));
            ok(srmkit(&[
                "fit", "--algo", algo, "--manifest", s(&manifest), "--k", "3", "--atlas", s(&atlas), "--seed", "11",
                "--n-jobs", jobs, "--out", s(&out),
            ]));
            dirs.push(dir_bytes(&out));
        }
        assert!(dirs[0].contains_key("model.json") && dirs[0].contains_key("fit_log.json"));
        assert_eq!(dirs[0], dirs[1], "{algo}: repeated run differs");
        assert_eq!(dirs[0], dirs[2], "{algo}: n_jobs 4 differs");
    }
}

#[test]
fn fit_outputs_match_schemas_and_default_to_ten_iterations() {
    let root = tempfile::tempdir().unwrap();
    let (manifest, atlas) = dataset(root.path(), "0.5", "3", 20);
    let model_schema = schema("model.schema.json");
    let log_schema = schema("fit_log.schema.json");
    for algo in ["detsrm", "probsrm", "fastsrm"] {
        let out = root.path().join(algo);
        ok(srmkit(&["fit", "--algo", algo, "--manifest", s(&manifest), "--k", "3", "--atlas", s(&atlas), "--out", s(&out)]));
        let log = load_json(&out.join("fit_log.json"));
        assert_valid(&log_schema, &log);
        assert_valid(&model_schema, &load_json(&out.join("model.json")));
        assert_eq!(log["n_iter"], 10);
        assert_eq!(log["trace"].as_array().unwrap().len(), 10);
    }
}

#[test]
fn transform_writes_one_shared_response_per_run() {
    let root = tempfile::tempdir().unwrap();
    let (manifest, _) = dataset(root.path(), "0.0", "3", 20);
    let model = root.path().join("model");
    ok(srmkit(&["fit", "--algo", "detsrm", "--manifest", s(&manifest), "--k", "3", "--out", s(&model)]));
    let out = root.path().join("shared");
    ok(srmkit(&["transform", "--model", s(&model), "--manifest", s(&manifest), "--subjects", "0,2", "--out", s(&out)]));
    let files = dir_bytes(&out);
    assert_eq!(files.len(), 3, "{:?}", files.keys().collect::<Vec<_>>());
    let (shared, _) = srmkit::dataio::load_matrix(out.join("shared_run-00.srmb")).unwrap();
    assert_eq!(shared.shape(), (15, 3));
}

#[test]
fn evaluate_needs_two_runs() {
    let root = tempfile::tempdir().unwrap();
    let (manifest, _) = dataset(root.path(), "0.5", "1", 20);
    let out = srmkit(&["evaluate", "--algo", "detsrm", "--manifest", s(&manifest), "--k", "3", "--out", s(&root.path().join("ev"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("co-smoothing"), "{}", stderr(&out));
}

#[test]
fn evaluate_recovers_noiseless_data_and_matches_schema() {
    let root = tempfile::tempdir().unwrap();
    let (manifest, atlas) = dataset(root.path(), "0.0", "3", 20);
    let summary_schema = schema("evaluate_summary.schema.json");
    for algo in ["detsrm", "probsrm", "fastsrm"] {
        let out = root.path().join(format!("ev-{algo}"));
        ok(srmkit(&[
            "evaluate", "--algo", algo, "--manifest", s(&manifest), "--k", "3", "--atlas", s(&atlas), "--n-iter", "50",
            "--out", s(&out),
        ]));
        let summary = load_json(&out.join("summary.json"));
        assert_valid(&summary_schema, &summary);
        let score = summary["mean_roi_r2"].as_f64().unwrap();
        assert!(score >= 0.999, "{algo}: {score}");
        assert_eq!(summary["per_fold"].as_array().unwrap().len(), 9);
        assert!(out.join("mean_map.srmb").exists());
        assert!(out.join("fold_sub-002_run-01.srmb").exists());
    }
}

#[test]
fn evaluate_is_deterministic_apart_from_timing() {
    let root = tempfile::tempdir().unwrap();
    let (manifest, atlas) = dataset(root.path(), "1.0", "3", 20);
    let mut runs = Vec::new();
    for (tag, jobs) in [("a", "1"), ("b", "4")] {
        let out = root.path().join(tag);
        ok(srmkit(&[
            "evaluate", "--algo", "fastsrm", "--manifest", s(&manifest), "--k", "3", "--atlas", s(&atlas), "--n-jobs",
            jobs, "--seed", "3", "--out", s(&out),
        ]));
        let mut files = dir_bytes(&out);
        let mut summary = load_json(&out.join("summary.json"));
        files.remove("summary.json");
        summary.as_object_mut().unwrap().remove("runtime_s");
        summary.as_object_mut().unwrap().remove("peak_mem_bytes");
        runs.push((files, summary));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn bench_reports_validate_and_traces_repeat() {
    let root = tempfile::tempdir().unwrap();
    let (manifest, atlas) = dataset(root.path(), "0.5", "3", 20);
    let report_schema = schema("bench_report.schema.json");
    let mut traces = Vec::new();
    for _ in 0..2 {
        let out = ok(srmkit(&[
            "bench", "--manifest", s(&manifest), "--k", "3", "--algos", "detsrm,probsrm,fastsrm", "--atlas", s(&atlas),
        ]));
        let lines: Vec<Value> = String::from_utf8(out.stdout)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        for line in &lines {
            assert_valid(&report_schema, line);
            assert!(line["peak_mem_bytes"].as_u64().unwrap() > 0);
        }
        assert_eq!(lines[2]["algorithm"], "fastsrm");
        traces.push(lines.iter().map(|l| l["trace"].clone()).collect::<Vec<_>>());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn runtime_failures_exit_1_and_name_the_run() {
    let root = tempfile::tempdir().unwrap();
    let (manifest, _) = dataset(root.path(), "0.5", "3", 20);
    let victim = root.path().join("data/data/sub-001_run-02.srmb");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let out = srmkit(&["fit", "--algo", "detsrm", "--manifest", s(&manifest), "--k", "3", "--out", s(&root.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.contains("error:"), "{msg}");
    assert!(msg.contains("sub-001_run-02") || (msg.contains("subject 1") && msg.contains("run 2")), "{msg}");
}
