use std::path::PathBuf;
use std::process::Command;

use lqg_pbe::cli::{self, load_spec, SolveArtifact, VerifyArtifact, EXIT_NOT_CONVERGED};
use lqg_pbe::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../specs").join(name)
}

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["lqg-pbe"];
    full.extend_from_slice(args);
    cli::main_with_args(full)
}

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn canonical_fixture_loads() {
    let spec = load_spec(&fixture("canonical_t2.json")).unwrap();
    assert_eq!((spec.n_players, spec.horizon, spec.dim_v, spec.dim_a), (2, 2, 1, 1));
}

#[test]
fn wrong_reward_size_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = std::fs::read_to_string(fixture("canonical_t2.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["reward_mat"][1] = serde_json::json!([[1.0, 0.0], [0.0, 1.0]]);
    std::fs::write(&path, v.to_string()).unwrap();
    let err = load_spec(&path).unwrap_err();
    assert!(err.to_string().contains("reward_mat"), "{err}");
}

#[test]
fn missing_key_is_a_parse_error_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = std::fs::read_to_string(fixture("canonical_t2.json")).unwrap();
    std::fs::write(&path, text.replace("\"horizon\": 2,\n", "")).unwrap();
    match load_spec(&path) {
        Err(Error::Parse(msg)) => {
            assert!(msg.contains("horizon"), "{msg}");
            assert!(msg.contains("line"), "{msg}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn zero_reward_solves_in_one_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("solve.json");
    assert_eq!(run(&["solve", "--spec", s(&fixture("zero_reward.json")), "--out", s(&out)]), 0);
    let art: SolveArtifact = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let report = art.report.unwrap();
    assert!(report.converged);
    assert_eq!(report.iterations, 1);
    for stage in &art.profile.stages {
        for st in stage {
            assert_eq!(st.l_mat.amax(), 0.0);
            assert_eq!(st.m_f.amax(), 0.0);
            assert!(st.m_const.iter().all(|c| *c == 0.0));
        }
    }
    assert_eq!(art.header.config.seed, 42);
}

#[test]
fn iteration_cap_reports_not_converged_and_still_writes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("solve.json");
    let code = run(&["solve", "--spec", s(&fixture("canonical_t3.json")), "--out", s(&out), "--max-iter", "1"]);
    assert_eq!(code, EXIT_NOT_CONVERGED);
    let art: SolveArtifact = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(!art.report.unwrap().converged);
}

#[test]
fn binary_prints_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("solve.json");
    let res = Command::new(env!("CARGO_BIN_EXE_lqg-pbe"))
        .args(["solve", "--spec", s(&fixture("canonical_t3.json")), "--out", s(&out), "--max-iter", "1"])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(EXIT_NOT_CONVERGED));
    let stderr = String::from_utf8(res.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    assert!(lines[0].starts_with("error: not_converged iterations=1 residual="));
}

#[test]
fn export_reload_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fixture("canonical_t2.json");
    let solved = dir.path().join("solve.json");
    let records = dir.path().join("solve.jsonl");
    let (v1, v2) = (dir.path().join("v1.json"), dir.path().join("v2.json"));
    assert_eq!(run(&["solve", "--spec", s(&spec), "--out", s(&solved)]), 0);
    assert_eq!(run(&["export", "--input", s(&solved), "--out", s(&records)]), 0);
    let common = ["--spec", s(&spec), "--paths", "5000", "--seed", "9"];
    let mut a = vec!["verify", "--profile", s(&solved), "--out", s(&v1)];
    a.extend_from_slice(&common);
    let mut b = vec!["verify", "--profile", s(&records), "--out", s(&v2)];
    b.extend_from_slice(&common);
    assert_eq!(run(&a), 0);
    assert_eq!(run(&b), 0);
    let x: VerifyArtifact = serde_json::from_str(&std::fs::read_to_string(&v1).unwrap()).unwrap();
    let y: VerifyArtifact = serde_json::from_str(&std::fs::read_to_string(&v2).unwrap()).unwrap();
    assert!(x.passed);
    assert_eq!(x.consistency, y.consistency);
    assert_eq!(x.certificate, y.certificate);
}

#[test]
fn simulate_dumps_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mc.json");
    let traj = dir.path().join("paths.jsonl");
    let code = run(&[
        "simulate",
        "--spec",
        s(&fixture("canonical_t2.json")),
        "--out",
        s(&out),
        "--paths",
        "25",
        "--trajectories",
        s(&traj),
        "--threads",
        "2",
    ]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&traj).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 26);
    assert_eq!(lines[0]["record"], "header");
    assert_eq!(lines[25]["path"], 24);
    let mc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(mc["monte_carlo"]["n_paths"], 25);
    assert_eq!(mc["header"]["config"]["threads"], 2);
}

#[test]
fn invalid_options_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.json");
    let spec = fixture("canonical_t2.json");
    assert_eq!(run(&["solve", "--spec", s(&spec), "--out", s(&out), "--damping", "0"]), cli::EXIT_ERROR);
    assert_eq!(run(&["simulate", "--spec", s(&spec), "--out", s(&out), "--paths", "1"]), cli::EXIT_ERROR);
    assert_eq!(run(&["solve", "--spec", "/nonexistent.json", "--out", s(&out)]), cli::EXIT_ERROR);
}
