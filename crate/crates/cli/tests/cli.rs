use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbsde-smp")).args(args).arg("--quiet").output().unwrap()
}

fn report(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn example_passes_globally_and_fails_locally() {
    let out = run(&["example", "--c", "0.25", "--d", "1", "--N", "64"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["pass"], true);
    assert_eq!(r["result"]["global_pass"], true);
    assert_eq!(r["result"]["local_fails"], true);
    assert_eq!(r["result"]["brute_force"]["argmin"], serde_json::json!([0.0, 0.0, 0.0]));
    assert!(r.get("wall_time_s").is_none());
}

#[test]
fn strongly_coupled_example_exits_nonzero() {
    let out = run(&["example", "--c", "1", "--N", "16"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(report(&out)["pass"], false);
}

#[test]
fn assumptions_on_the_zero_preset_all_pass() {
    let out = run(&["assumptions", "--preset", "zero"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["result"]["all_ok"], true);
    assert_eq!(r["result"]["t_star"]["t_star"], "-inf");
}

#[test]
fn spike_orders_emit_rows_and_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("orders.csv");
    let out =
        run(&["spike-orders", "--preset", "nonlinear", "--N", "64", "--paths", "2000", "--csv", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("eps,statistic,value"));
    let eps: std::collections::BTreeSet<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert!(eps.len() >= 4);
    let fits = report(&out)["result"]["fits"].as_array().unwrap().clone();
    assert!(fits.iter().any(|f| f["statistic"] == "x_rem2"));
}

#[test]
fn identical_configs_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write(dir.path(), "p.json", r#"{"T": 1, "N": 32, "coefficients": "nonlinear", "seed": 3}"#);
    for args in [
        vec!["solve", problem.as_str()],
        vec!["adjoint", problem.as_str()],
        vec!["check-mp", problem.as_str()],
        vec!["spike-orders", problem.as_str(), "--N", "64", "--paths", "500"],
    ] {
        let a = run(&args);
        let b = Command::new(env!("CARGO_BIN_EXE_fbsde-smp"))
            .args(&args)
            .arg("--quiet")
            .env("FBSDE_SMP_THREADS", "1")
            .output()
            .unwrap();
        assert!(a.status.success(), "{args:?}: {}", String::from_utf8_lossy(&a.stderr));
        assert_eq!(a.stdout, b.stdout, "{args:?}");
    }
}

#[test]
fn unknown_keys_are_usage_errors_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let problem =
        write(dir.path(), "p.json", r#"{"T": 1, "N": 8, "coefficients": "zero", "control": {"candidat": 0}}"#);
    let out = run(&["solve", &problem]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("control.candidat"));
    let out = run(&["solve", "--preset", "zero", "--control", r#"{"feedback": "y"}"#]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("control.candidate.feedback"));
}

#[test]
fn solve_writes_the_tree() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("tree.csv");
    let out = run(&["solve", "--preset", "linear-1", "--N", "8", "--tree-csv", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("step,node,X,Y,Z"));
    assert_eq!(text.lines().count(), 1 + 9 * 10 / 2);
    let y0: f64 = text.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(y0, report(&out)["result"]["y0"].as_f64().unwrap());
}

#[test]
fn check_mp_modes_and_gap_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("gaps.csv");
    let interval = r#"{"interval": {"lo": -1, "hi": 1, "points": 5}}"#;
    let out = run(&[
        "check-mp",
        "--preset",
        "example",
        "--N",
        "16",
        "--mode",
        "local",
        "--domain",
        interval,
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(report(&out)["result"]["worst"]["u"], -1.0);
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("step,node,t,x,u,gap\n"));
    assert_eq!(run(&["check-mp", "--preset", "example", "--N", "16", "--mode", "lq"]).status.code(), Some(0));
    assert_eq!(run(&["check-mp", "--preset", "nonlinear", "--N", "16", "--mode", "lq"]).status.code(), Some(2));
}

#[test]
fn lq_and_adjoint_reports() {
    let out = run(&["lq", "--preset", "example", "--N", "16", "--brute-pieces", "2"]);
    assert!(out.status.success());
    assert_eq!(report(&out)["result"]["brute_force"]["argmin"], serde_json::json!([0.0, 0.0]));
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("adj.csv");
    let out = run(&["adjoint", "--preset", "example", "--N", "16", "--csv", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let r = report(&out);
    assert_eq!(r["result"]["p0"], 1.0);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 18);
}

#[test]
fn timing_is_opt_in() {
    let out = run(&["assumptions", "--preset", "zero", "--timing"]);
    assert!(report(&out)["wall_time_s"].is_number());
}
