mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moek::numkit::{read_matrix_file, write_matrix_file, Dtype, RealMatrix};

const FIXTURE_SEED: u64 = 7;

fn moek(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moek")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn field(text: &str, key: &str) -> f64 {
    let tok = text
        .split_whitespace()
        .find_map(|t| t.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {text:?}"));
    tok.parse().unwrap()
}

/// Set MOEK_REGEN_FIXTURES=1 to rewrite the shipped files.
#[test]
fn shipped_fixture_matches_generator() {
    let (w, x) = common::outlier_fixture(FIXTURE_SEED);
    let (wp, xp) = (fixtures().join("outlier_weights.bin"), fixtures().join("outlier_calib.bin"));
    if std::env::var_os("MOEK_REGEN_FIXTURES").is_some() {
        write_matrix_file(&wp, &w, Dtype::F64).unwrap();
        write_matrix_file(&xp, &x, Dtype::F64).unwrap();
    }
    assert_eq!(read_matrix_file(&wp).unwrap(), w);
    assert_eq!(read_matrix_file(&xp).unwrap(), x);
}

#[test]
fn quantize_fixture_beats_rtn() {
    let dir = tempfile::tempdir().unwrap();
    let o = moek(&[
        "quantize",
        "--weights",
        arg(&fixtures().join("outlier_weights.bin")),
        "--calib",
        arg(&fixtures().join("outlier_calib.bin")),
        "--out-dir",
        arg(dir.path()),
        "--pack",
        "gpu_int",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("# config "));
    let last = out.lines().last().unwrap();
    assert!(field(last, "output_mse") < field(last, "rtn_baseline_mse"), "{last}");
    assert!(dir.path().join("codes.bin").exists());
    assert!(dir.path().join("layer.toml").exists());
    assert!(dir.path().join("expert.gpu_int.bin").exists());
}

#[test]
fn on_grid_weights_have_zero_error_with_exact_activations() {
    let dir = tempfile::tempdir().unwrap();
    // Integer weights in [-8, 7] sit on the 4-bit grid of every row; one-hot
    // activations are exactly representable too.
    let w = RealMatrix::from_fn(3, 4, |i, j| [-8.0, 7.0, (i as f64) - 2.0, 1.0][(i + j) % 4]).unwrap();
    let x = RealMatrix::from_fn(4, 8, |i, j| if j % 4 == i { 1.0 } else { 0.0 }).unwrap();
    let (wp, xp) = (dir.path().join("w.bin"), dir.path().join("x.bin"));
    write_matrix_file(&wp, &w, Dtype::F64).unwrap();
    write_matrix_file(&xp, &x, Dtype::F64).unwrap();
    let o = moek(&[
        "quantize", "--weights", arg(&wp), "--calib", arg(&xp), "--out-dir", arg(dir.path()),
        "--bits", "4", "--grid-steps", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let last = stdout(&o).lines().last().unwrap().to_owned();
    assert_eq!(field(&last, "output_mse"), 0.0, "{last}");
}

#[test]
fn missing_input_is_an_io_error_naming_the_path() {
    let o = moek(&["quantize", "--weights", "/nonexistent/w.bin", "--calib", "/nonexistent/x.bin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/w.bin"), "{}", stderr(&o));

    let o = moek(&["stats", "--trace", "/nonexistent/t.trace"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/t.trace"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(moek(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(moek(&["quantize"]).status.code(), Some(1));
    assert_eq!(moek(&["--jobs", "0", "gen-trace", "--out", "/tmp/x"]).status.code(), Some(1));
    assert_eq!(moek(&["sweep", "--strategies", "psychic"]).status.code(), Some(1));
    assert_eq!(moek(&["quantize", "--weights", "a", "--calib", "b", "--bits", "12"]).status.code(), Some(1));
    assert_eq!(moek(&["--help"]).status.code(), Some(0));
}

#[test]
fn all_zero_calibration_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let (wp, xp) = (dir.path().join("w.bin"), dir.path().join("x.bin"));
    write_matrix_file(&wp, &RealMatrix::identity(4), Dtype::F64).unwrap();
    write_matrix_file(&xp, &RealMatrix::zeros(4, 16), Dtype::F64).unwrap();
    let o = moek(&["quantize", "--weights", arg(&wp), "--calib", arg(&xp), "--out-dir", arg(dir.path())]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn shape_mismatch_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (wp, xp) = (dir.path().join("w.bin"), dir.path().join("x.bin"));
    write_matrix_file(&wp, &RealMatrix::identity(4), Dtype::F64).unwrap();
    write_matrix_file(&xp, &RealMatrix::identity(3), Dtype::F64).unwrap();
    let o = moek(&["quantize", "--weights", arg(&wp), "--calib", arg(&xp), "--out-dir", arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_is_echoed_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[gen]\nlayers = 3\nn_decode_tokens = 20\n[cost]\nlatency_cpu_ms = inf\n").unwrap();
    let trace = dir.path().join("t.trace");
    let o = moek(&["--config", arg(&cfg), "--seed", "5", "gen-trace", "--out", arg(&trace)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = stdout(&o).lines().next().unwrap().to_owned();
    let table: toml::Table = toml::from_str(&format!("echo = {}", first.strip_prefix("# config ").unwrap())).unwrap();
    let echo = &table["echo"];
    assert_eq!(echo["command"].as_str(), Some("gen-trace"));
    assert_eq!(echo["config"]["gen"]["layers"].as_integer(), Some(3));
    assert_eq!(echo["config"]["gen"]["seed"].as_integer(), Some(5));
    assert_eq!(echo["config"]["cost"]["latency_cpu_ms"].as_float(), Some(f64::INFINITY));

    std::fs::write(&cfg, "[gen]\nlayerz = 3\n").unwrap();
    assert_eq!(moek(&["--config", arg(&cfg), "gen-trace", "--out", arg(&trace)]).status.code(), Some(1));
}

#[test]
fn trace_plan_simulate_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let o = moek(&[
        "--seed", "3", "gen-trace", "--out", arg(&p("t.trace")), "--layers", "4", "--prefill", "10",
        "--decode", "40", "--sequences", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = moek(&["stats", "--trace", arg(&p("t.trace")), "--top", "3"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("100 tokens"));

    let o = moek(&["plan", "--trace", arg(&p("t.trace")), "--out", arg(&p("plan.toml"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("16 residents"));
    let o = moek(&["plan", "--trace", arg(&p("t.trace")), "--out", arg(&p("f.toml")), "--strategy", "frequency", "--budget", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut jsons = Vec::new();
    for plan in ["plan.toml", "f.toml"] {
        let json = p(&format!("{plan}.json"));
        let o = moek(&[
            "simulate", "--trace", arg(&p("t.trace")), "--plan", arg(&p(plan)), "--format", "csv",
            "--cache-capacity", "4", "--json-out", arg(&json),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let csv_text: String = stdout(&o).lines().skip(1).map(|l| format!("{l}\n")).collect();
        let mut rd = csv::Reader::from_reader(csv_text.as_bytes());
        assert_eq!(rd.records().count(), 5);
        jsons.push(json);
    }
    let o = moek(&["report", arg(&jsons[0]), arg(&jsons[1]), "--format", "plotdata"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let body: String = stdout(&o).lines().skip(1).collect();
    let v: serde_json::Value = serde_json::from_str(&body).unwrap();
    let series = v["series"].as_array().unwrap();
    assert_eq!(series.len(), 2);
    assert_eq!(series[1]["strategy"].as_str(), Some("frequency"));
    assert_eq!(series[0]["hit_rate"].as_array().unwrap().len(), 4);
}

#[test]
fn sweep_writes_the_full_grid_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let run = |jobs: &str, name: &str| {
        let out = dir.path().join(name);
        let o = moek(&[
            "--jobs", jobs, "sweep", "--out", arg(&out), "--layers", "8", "--decode", "300",
            "--budgets", "32,40", "--lengths", "10,20,40", "--eval-tokens", "200",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(out).unwrap()
    };
    let a = run("1", "a.csv");
    let b = run("3", "b.csv");
    assert_eq!(a, b);
    let mut rd = csv::Reader::from_reader(a.as_bytes());
    assert_eq!(rd.headers().unwrap().len(), 11);
    assert_eq!(rd.records().count(), 18);
}
