use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lrqc::operators::{asymptotic_max, LocalOperator};

const REFERENCE_RUN: &str = r#"mode = "bound"

[geometry]
sites = 15
local_dim = 2

[observables]
p = 0
q = "all"
op_p = [[0.5, 0.0], [0.0, 0.0], [0.0, 0.0], [0.3, 0.0]]
op_q = [[0.7, 0.0], [0.0, 0.0], [0.0, 0.0], [0.1, 0.0]]

[time]
points = [10, 100, 200, 500]
"#;

fn lrqc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrqc")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().unwrap().iter().map(str::to_owned).collect();
    let rows = reader.records().map(|r| r.unwrap().iter().map(str::to_owned).collect()).collect();
    (header, rows)
}

#[test]
fn reference_config_writes_sixty_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "reference.toml", REFERENCE_RUN);
    let out_path = dir.path().join("reference.csv");
    let out = lrqc(&["--config", &config, "-o", out_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (header, rows) = csv_rows(&fs::read_to_string(&out_path).unwrap());
    assert_eq!(header, ["L", "d", "p", "q", "D", "t", "eta_max_scaled"]);
    assert_eq!(rows.len(), 60);
    for row in &rows {
        let v: f64 = row[6].parse().unwrap();
        assert!((0.0..0.05).contains(&v));
    }
}

#[test]
fn infinite_time_rows_match_asymptote() {
    let out = lrqc(&["--t", "inf"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m =
        asymptotic_max(&LocalOperator::diagonal(&[0.5, 0.3]).unwrap(), &LocalOperator::diagonal(&[0.7, 0.1]).unwrap())
            .unwrap();
    let (_, rows) = csv_rows(&stdout(&out));
    assert_eq!(rows.len(), 15);
    for row in rows {
        assert_eq!(row[5], "inf");
        let v: f64 = row[6].parse().unwrap();
        assert!((v - m).abs() < 1e-9, "{v} vs {m}");
    }
}

#[test]
fn bound_output_is_byte_identical_across_runs_and_threads() {
    let a = lrqc(&["--t", "1,7,30,inf", "--threads", "1"]);
    let b = lrqc(&["--t", "1,7,30,inf"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn empty_time_list_is_rejected_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "bad.toml", &REFERENCE_RUN.replace("points = [10, 100, 200, 500]", "points = []"));
    let out_path = dir.path().join("never.csv");
    let out = lrqc(&["--config", &config, "-o", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 14"), "{}", stderr(&out));
    assert!(!out_path.exists());
}

#[test]
fn zero_samples_is_rejected() {
    let out = lrqc(&["--mode", "mc", "--sites", "4", "--t", "3", "--n-samples", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!stderr(&out).is_empty());
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config =
        write(dir.path(), "typo.toml", &REFERENCE_RUN.replace("local_dim = 2", "local_dim = 2\nlocal_dimm = 2"));
    let out = lrqc(&["--config", &config]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("local_dimm"), "{}", stderr(&out));
}

#[test]
fn oversized_monte_carlo_is_rejected() {
    let out = lrqc(&["--mode", "mc", "--sites", "9", "--t", "3"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn monte_carlo_is_deterministic_per_seed() {
    let args = ["--mode", "mc", "--sites", "5", "--t", "1,4,8", "--n-samples", "200", "--seed", "11"];
    let a = lrqc(&args);
    let b = lrqc(&[&args[..], &["--threads", "1"]].concat());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let (header, rows) = csv_rows(&stdout(&a));
    assert_eq!(header, ["L", "d", "p", "q", "D", "t", "eta_mc_scaled", "stderr", "n_samples", "master_seed"]);
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| r[8] == "200" && r[9] == "11"));
    let other = lrqc(&["--mode", "mc", "--sites", "5", "--t", "1,4,8", "--n-samples", "200", "--seed", "12"]);
    assert_ne!(a.stdout, other.stdout);
}

#[test]
fn check_mode_passes_and_detects_corruption() {
    let out = lrqc(&["--mode", "check", "--n-samples", "500"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let (_, rows) = csv_rows(&stdout(&out));
    assert!(rows.iter().all(|r| r[1] == "pass"));

    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "corrupt.toml",
        "mode = \"check\"\n\n[sampling]\nn_samples = 500\n\n[check]\nsites = [4]\ncorrupt_sink_diagonal = true\n",
    );
    let out = lrqc(&["--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    let (_, rows) = csv_rows(&stdout(&out));
    let sink = rows.iter().find(|r| r[0] == "L4_sink_fixed_points").unwrap();
    assert_eq!(sink[1], "fail");
}

#[test]
fn json_mirrors_csv() {
    let csv_out = lrqc(&["--t", "5,inf", "--q", "1,2"]);
    let json_out = lrqc(&["--t", "5,inf", "--q", "1,2", "--format", "json"]);
    assert!(json_out.status.success());
    let (header, rows) = csv_rows(&stdout(&csv_out));
    let parsed: serde_json::Value = serde_json::from_slice(&json_out.stdout).unwrap();
    let records = parsed.as_array().unwrap();
    assert_eq!(records.len(), rows.len());
    for (record, row) in records.iter().zip(&rows) {
        let obj = record.as_object().unwrap();
        assert_eq!(obj.keys().len(), header.len());
        for (name, cell) in header.iter().zip(row) {
            let v = &obj[name];
            match v {
                serde_json::Value::String(s) => assert_eq!(s, cell),
                serde_json::Value::Number(n) => {
                    let a = n.as_f64().unwrap();
                    let b: f64 = cell.parse().unwrap();
                    assert!((a - b).abs() <= 1e-8 * a.abs().max(1e-300), "{name}: {a} vs {b}");
                }
                other => panic!("unexpected {other}"),
            }
        }
    }
}

#[test]
fn meta_sidecar_records_constants() {
    let dir = tempfile::tempdir().unwrap();
    let meta = dir.path().join("meta.json");
    let out = lrqc(&["--t", "10", "--meta", meta.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(meta).unwrap()).unwrap();
    for key in ["r", "u", "A", "B", "M_cal", "T1", "T2", "L", "d", "p"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!((v["r"].as_f64().unwrap() - 13.0 / 15.0).abs() < 1e-15);
    assert!((v["u"].as_f64().unwrap() - 0.4 / 15.0).abs() < 1e-15);
}

#[test]
fn closed_form_modes_skip_p_and_flag_regime() {
    for (mode, column) in [("short", "short_time_scaled"), ("long", "long_time_scaled")] {
        let out = lrqc(&["--mode", mode, "--t", "3,2000"]);
        assert!(out.status.success(), "{}", stderr(&out));
        let (header, rows) = csv_rows(&stdout(&out));
        assert_eq!(header[6], column);
        assert_eq!(header[7], "in_regime");
        assert_eq!(rows.len(), 28);
        assert!(rows.iter().all(|r| r[3] != "0"));
        let flags: Vec<&str> = rows.iter().map(|r| r[7].as_str()).collect();
        assert!(flags.contains(&"true") && flags.contains(&"false"), "{mode}: {flags:?}");
    }
}

#[test]
fn astar_mode_rows() {
    let out = lrqc(&["--mode", "astar", "--sites", "10", "--t", "20,200"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (header, rows) = csv_rows(&stdout(&out));
    assert_eq!(header, ["L", "d", "D", "t", "a_star", "a_exact"]);
    assert_eq!(rows.len(), 20);
    for row in rows.iter().filter(|r| !r[5].is_empty()) {
        let star: f64 = row[4].parse().unwrap();
        let exact: f64 = row[5].parse().unwrap();
        assert!(exact >= star * (1.0 - 1e-8), "{row:?}");
    }
}

#[test]
fn signed_axis_reports_offsets() {
    let out = lrqc(&["--t", "4", "--signed-axis"]);
    let (_, rows) = csv_rows(&stdout(&out));
    let axis: Vec<i64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    let mut sorted = axis.clone();
    sorted.sort();
    assert_eq!(sorted, (-7..=7).collect::<Vec<_>>());
}
