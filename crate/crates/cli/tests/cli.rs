use std::path::Path;
use std::process::{Command, Output};

use atomic_routing::io::load_game;
use tempfile::TempDir;

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atomic-routing"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn solve_writes_converged_equilibrium() {
    let dir = TempDir::new().unwrap();
    let out = run(&["solve", "--scenario", "two_player_3x3", "--lambda", "0.01"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eq = read_json(&dir.path().join("equilibrium.json"));
    assert!(eq["residual"].as_f64().unwrap() <= 1e-8);
    assert_eq!(eq["x"].as_array().unwrap().len(), 48);
}

#[test]
fn homotopy_certifies_gap() {
    let dir = TempDir::new().unwrap();
    let out = run(&["solve", "--scenario", "two_player_3x3", "--homotopy"], dir.path());
    assert!(out.status.success());
    let eq = read_json(&dir.path().join("equilibrium.json"));
    assert!(eq["gap"].as_f64().unwrap() <= 1e-2);

    let flow = dir.path().join("equilibrium.json");
    let out = run(
        &["gap", "--scenario", "two_player_3x3", "--flow", flow.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success());
    assert!(read_json(&dir.path().join("gap.json"))["gap"].as_f64().unwrap() <= 1e-2);
}

#[test]
fn solver_failure_exits_two() {
    let dir = TempDir::new().unwrap();
    let out = run(
        &["solve", "--scenario", "two_player_3x3", "--lambda", "0.01", "--max-iters", "1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_inputs_exit_one() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"graph":{"n":2,"links":[[1,2],[2,1]]},"players":[{"origin":1,"destination":1}],
            "b":[0.1,0.1],"C":[[0,0],[0,0]],"rho":1}"#,
    )
    .unwrap();
    let out = run(&["solve", "--game", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["solve", "--scenario", "three_player_4x4"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let out = run(
        &["sweep", "--scenario", "two_player_3x3", "--param", "rho", "--values", ""],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["design", "--scenario", "two_player_3x3", "--path", "1,5,9"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_step_design_records_one_iteration() {
    let dir = TempDir::new().unwrap();
    let out = run(&["design", "--scenario", "two_player_3x3", "--alpha", "0"], dir.path());
    assert!(out.status.success());
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
}

#[test]
fn designed_game_reloads() {
    let dir = TempDir::new().unwrap();
    let out = run(&["design", "--scenario", "two_player_3x3"], dir.path());
    assert!(out.status.success());
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["path_match"], true);
    let game = load_game(&dir.path().join("designed_game.json")).unwrap();
    let b: Vec<f64> = serde_json::from_value(report["b"].clone()).unwrap();
    assert_eq!(game.costs().b().as_slice(), b.as_slice());

    // The designed game can be fed back in.
    let game_path = dir.path().join("designed_game.json");
    let again = run(&["solve", "--game", game_path.to_str().unwrap()], &dir.path().join("again"));
    assert!(again.status.success());
}

#[test]
fn iteration_cap_limits_trace() {
    let dir = TempDir::new().unwrap();
    let out = run(&["design", "--scenario", "four_player_5x5", "--max-iters", "3"], dir.path());
    assert!(out.status.success());
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.lines().count() <= 4);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = TempDir::new().unwrap();
    let out = run(
        &["sweep", "--scenario", "two_player_3x3", "--param", "lambda", "--values", "1,0.01"],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "param,psi_final");
    assert_eq!(rows.len(), 3);
    let psi: Vec<f64> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(psi[0] > psi[1]);
}
