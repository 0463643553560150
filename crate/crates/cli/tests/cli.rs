use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_steinpair"));
    c.env_remove("STEINPAIR_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON report")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

struct Fixture {
    _dir: tempfile::TempDir,
    kernel: PathBuf,
    functional: PathBuf,
    dir: PathBuf,
}

fn two_point() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let kernel = write(dir.path(), "twopoint.csv", "mu,a,b\n0.5,0,1\n0.5,1,0\n");
    let functional = write(dir.path(), "f.csv", "-1\n1\n");
    Fixture { dir: dir.path().to_path_buf(), _dir: dir, kernel, functional }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn analyze_kernel_two_point() {
    let fx = two_point();
    let v = json(&run(&["analyze-kernel", "--kernel", s(&fx.kernel)]));
    let spectrum: Vec<f64> = v["result"]["spectrum"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!(spectrum[0].abs() < 1e-12 && (spectrum[1] - 2.0).abs() < 1e-12);
    assert!((v["result"]["gap"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert!((v["result"]["poincare_constant"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(v["tool"], "steinpair");
    assert_eq!(v["config"]["analyze-kernel"]["kernel"], s(&fx.kernel));
}

#[test]
fn bound_gb11_two_point_and_report_file() {
    let fx = two_point();
    let report = fx.dir.join("r.json");
    let out = run(&["bound", "--variant", "gb11", "--kernel", s(&fx.kernel), "--functional", s(&fx.functional), "--report", s(&report)]);
    assert!(out.status.success());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!((v["result"]["total"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(v["result"]["variant"], "gb11");
}

#[test]
fn pearson_uniform_rate_profile() {
    let v = json(&run(&["pearson", "--n", "10000", "--m", "100", "--dist", "uniform", "--mode", "rate"]));
    assert!((v["result"]["bound"]["total"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    assert!(v["result"]["verdict"].is_null());
}

#[test]
fn pearson_two_classes_uses_the_exact_law() {
    let v = json(&run(&["pearson", "--n", "100", "--m", "2"]));
    assert!(v["result"]["exact_w1"].as_f64().unwrap() > 0.0);
    assert_eq!(v["result"]["verdict"]["pass"], true);
}

#[test]
fn reruns_are_byte_identical() {
    let args = ["pearson", "--n", "200", "--m", "5", "--mc-samples", "5000", "--seed", "7"];
    let a = run(&args);
    let b = bin().args(args).env("STEINPAIR_THREADS", "2").output().unwrap();
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["seed"], 7);
}

#[test]
fn bad_thread_setting_is_a_validation_error() {
    let out = bin().args(["pearson", "--n", "10", "--m", "3"]).env("STEINPAIR_THREADS", "many").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validation_errors_exit_one() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["pearson", "--n", "10"]).status.code(), Some(1));
    assert_eq!(run(&["pearson", "--n", "10", "--m", "3", "--dist", "weird"]).status.code(), Some(1));
    let fx = two_point();
    let bad = write(&fx.dir, "bad.json", "{not json");
    assert_eq!(run(&["verify", "--spec", s(&bad)]).status.code(), Some(1));
    assert_eq!(run(&["bound", "--variant", "gb99", "--kernel", s(&fx.kernel), "--functional", s(&fx.functional)]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    assert!(run(&["--help"]).status.success());
}

#[test]
fn verify_dominance_verdicts() {
    let fx = two_point();
    let spec = write(&fx.dir, "spec.json", r#"{"kind":"finite","mu":[0.5,0.5],"values":[-1,1]}"#);
    let big = write(&fx.dir, "big.json", r#"{"variant":"x","total":2.0}"#);
    let small = write(&fx.dir, "small.json", r#"{"result":{"variant":"x","total":0.01}}"#);
    let v = json(&run(&["verify", "--spec", s(&spec), "--samples", "20000", "--bound", s(&big)]));
    assert_eq!(v["result"]["verdict"]["pass"], true);
    let exact = v["result"]["exact_w1"].as_f64().unwrap();
    let mc = v["result"]["w1"]["value"].as_f64().unwrap();
    let se = v["result"]["w1"]["mc_standard_error"].as_f64().unwrap();
    assert!((exact - mc).abs() < 4.0 * se + 1e-3);
    let out = run(&["verify", "--spec", s(&spec), "--samples", "20000", "--bound", s(&small)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn ustat_bound_with_monte_carlo_check() {
    let v = json(&run(&["ustat-bound", "--kernel", "coincidence", "--alphabet", "3", "--n", "20", "--mc-samples", "5000", "--seed", "3"]));
    assert_eq!(v["result"]["bound"]["variant"], "symustat1");
    assert!(v["result"]["bound"]["total"].as_f64().unwrap() > 0.0);
    assert_eq!(v["result"]["verdict"]["pass"], true);
}

#[test]
fn ustat_tensor_csv_matches_builtin() {
    let fx = two_point();
    let mut text = String::from("i,j,value\n");
    for i in 0..3 {
        for j in 0..3 {
            text.push_str(&format!("{i},{j},{}\n", u8::from(i == j)));
        }
    }
    let path = write(&fx.dir, "psi.csv", &text);
    let a = json(&run(&["ustat-bound", "--kernel", s(&path), "--n", "15", "--variant", "genboundsymstat"]));
    let b = json(&run(&["ustat-bound", "--kernel", "coincidence", "--alphabet", "3", "--n", "15", "--variant", "genboundsymstat"]));
    assert_eq!(a["result"]["bound"]["total"], b["result"]["bound"]["total"]);
}

#[test]
fn hoeffding_summary_of_a_linear_statistic() {
    let fx = two_point();
    let space = write(&fx.dir, "ps.json", r#"{"alphabets":[["0","1"],["0","1"]],"marginals":[[0.5,0.5],[0.5,0.5]]}"#);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let f = write(&fx.dir, "hf.csv", &format!("{}\n0\n0\n{}\n", -2.0 * r, 2.0 * r));
    let v = json(&run(&["hoeffding", "--space", s(&space), "--functional", s(&f)]));
    let orders: Vec<f64> = v["result"]["order_variances"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!(orders[0].abs() < 1e-12 && (orders[1] - 1.0).abs() < 1e-12 && orders[2].abs() < 1e-12);
    assert!(v["result"]["eigen_residuals"]["max"].as_f64().unwrap() < 1e-12);
}

#[test]
fn sweep_writes_csv_rows() {
    let fx = two_point();
    let csv_path = fx.dir.join("sweep.csv");
    let out = run(&["sweep", "pearson", "--m", "4", "--ngrid", "50,100", "--mc-samples", "5000", "--csv", s(&csv_path)]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n,bound,W1_hat,SE,regime,pass");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("50,") && lines[2].starts_with("100,"));
}

#[test]
fn geomgraph_small_grid() {
    let v = json(&run(&["geomgraph", "--d", "2", "--motif", "edge", "--tn", "n^-0.5", "--ngrid", "100,200", "--replicates", "500", "--norm-samples", "5000"]));
    assert_eq!(v["result"]["regime"]["case"], "C4");
    assert_eq!(v["result"]["points"].as_array().unwrap().len(), 2);
}
