use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bridgesim"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

const PINNED: &str = "[model]\nJ = 6\n[qtilde]\neps = 0.0\n[initial]\nx = [0.3, 0.0, -1.0]\ny = [1.5, -2.0, 0.25, 0.0, 3.0, -0.5]\n[sampling]\nsamples = 20\ngrid_points = 9\n";

#[test]
fn check_assumptions_prints_budget() {
    let out = run(&["check-assumptions"]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["beta_sup"], 0.5);
    assert_eq!(v["rho_sup"], 1.0);
    assert_eq!(v["method"], "analytic");
}

#[test]
fn boundary_budget_warns_and_succeeds() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "b.toml", "[qtilde]\nkind = \"power\"\neps = 1.0\na = 1.0\n");
    let out = run(&["check-assumptions", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn pinned_bridge_hits_target() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "pinned.toml", PINNED);
    let csv = dir.path().join("b.csv");
    let out = run(&["sample-bridge", "--config", s(&cfg), "--out", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let y = [1.5, -2.0, 0.25, 0.0, 3.0, -0.5];
    let rows = read_csv(&csv);
    assert_eq!(rows.len(), 20 * 9);
    let ends: Vec<_> = rows.iter().filter(|r| r[1] == 1.0).collect();
    assert_eq!(ends.len(), 20);
    for r in ends {
        for (a, b) in r[2..].iter().zip(&y) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    let side: Value = serde_json::from_slice(&std::fs::read(dir.path().join("b.bridge.json")).unwrap()).unwrap();
    assert_eq!(side["pinned"], true);
    assert_eq!(side["N"], 6);
    assert_eq!(side["seed"], 0);
    assert_eq!(side["target_y"][4], 3.0);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "pinned.toml", &PINNED.replace("eps = 0.0", "eps = 0.2"));
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert_eq!(code(&run(&["sample-bridge", "--config", s(&cfg), "--out", s(&a), "--threads", "1"])), 0);
    assert_eq!(code(&run(&["sample-bridge", "--config", s(&cfg), "--out", s(&b), "--threads", "3"])), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let side: Value = serde_json::from_slice(&std::fs::read(dir.path().join("a.bridge.json")).unwrap()).unwrap();
    assert_eq!(side["pinned"], false);
}

#[test]
fn seed_flag_overrides_file() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.toml", "seed = 5\n[model]\nJ = 4\n[sampling]\nsamples = 3\ngrid_points = 3\n");
    let file_seed = run(&["sample-forward", "--config", s(&cfg)]);
    let flag_seed = run(&["sample-forward", "--config", s(&cfg), "--seed", "5"]);
    let other = run(&["sample-forward", "--config", s(&cfg), "--seed", "6"]);
    assert_eq!(code(&file_seed), 0);
    assert_eq!(file_seed.stdout, flag_seed.stdout);
    assert_ne!(file_seed.stdout, other.stdout);
}

#[test]
fn forward_json_format() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.toml", "[model]\nJ = 3\n[initial]\nx = [1.0, 2.0, 3.0]\n[sampling]\nsamples = 2\ngrid_points = 4\n[output]\nformat = \"json\"\n");
    let out = run(&["sample-forward", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["frame"], "spectral");
    assert_eq!(v["t"].as_array().unwrap().len(), 4);
    assert_eq!(v["paths"].as_array().unwrap().len(), 2);
    assert_eq!(v["paths"][1][0][2], 3.0);
}

#[test]
fn oracle_check_passes_and_fails_by_tolerance() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "small.toml",
        "[model]\nJ = 8\n[qtilde]\neps = 0.1\n[initial]\nx = [0.5, -0.5]\ny = [1.0, 0.0, -1.0]\n",
    );
    let out = run(&["oracle-check", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["max_rel_deviation"].as_f64().unwrap() <= 1e-8);
    assert_eq!(v["modes"], 6);
    let strict = write(&dir, "strict.toml", "[oracle]\ntolerance = 1e-300\n");
    let out = run(&["oracle-check", "--config", s(&strict)]);
    assert_eq!(code(&out), 3);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], false);
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["check-assumptions", "--config", "/nonexistent/x.toml"])), 2);
    let bad = write(&dir, "bad.toml", "[model]\nJ = 4\nK = 1\n");
    assert_eq!(code(&run(&["check-assumptions", "--config", s(&bad)])), 2);
    let other = write(&dir, "other.toml", "command = \"sample-bridge\"\n");
    assert_eq!(code(&run(&["check-assumptions", "--config", s(&other)])), 2);
    let ladder = write(&dir, "ladder.toml", "[model]\nJ = 64\n[study]\nlevels = [4, 8, 16, 32]\n");
    assert_eq!(code(&run(&["converge-spectral", "--config", s(&ladder)])), 2);
    let mesh = write(&dir, "mesh.toml", "[model]\nJ = 16\n[fem]\nh = 0.3\n");
    assert_eq!(code(&run(&["sample-fem-bridge", "--config", s(&mesh)])), 2);
}

#[test]
fn dry_run_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "pinned.toml", PINNED);
    let csv = dir.path().join("b.csv");
    let out = run(&["sample-bridge", "--config", s(&cfg), "--out", s(&csv), "--dry-run"]);
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
    assert!(!csv.exists());
    let bad = write(&dir, "bad.toml", "[study]\nlevels = [4, 2, 8, 16]\n");
    assert_eq!(code(&run(&["converge-spectral", "--config", s(&bad), "--dry-run"])), 2);
}

#[test]
fn schema_flag() {
    let out = run(&["converge-spectral", "--schema"]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["title"], "ConvergenceReport");
    assert_eq!(v["required"][0], "levels");
    let out = run(&["oracle-check", "--schema"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["title"], "OracleReport");
}

#[test]
fn spectral_study_writes_report_and_companion() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.toml", "[model]\nJ = 256\n[study]\nlevels = [4, 8, 16, 32, 64]\ngrid_points = 33\n");
    let json = dir.path().join("r.json");
    let out = run(&["converge-spectral", "--config", s(&cfg), "--out", s(&json)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let slope = v["slope"].as_f64().unwrap();
    assert!(slope < -0.4 && slope > -0.6, "{slope}");
    assert_eq!(v["levels"].as_array().unwrap().len(), 5);
    assert_eq!(v["metadata"]["seed"], 0);
    let rows = read_csv(&dir.path().join("r.csv"));
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0][0], 4.0);
    assert_eq!(rows[2][1], v["levels"][2]["error"].as_f64().unwrap());
}

#[test]
fn fem_bridge_writes_mesh_sidecar() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "f.toml", "[model]\nJ = 32\n[fem]\nh = 0.125\neps = 0.5\n[initial]\ny = [1.0]\n[sampling]\nsamples = 4\ngrid_points = 5\n");
    let csv = dir.path().join("f.csv");
    let out = run(&["sample-fem-bridge", "--config", s(&cfg), "--out", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let header = std::fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "sample,t,node_1,node_2,node_3,node_4,node_5,node_6,node_7");
    let mesh: Value = serde_json::from_slice(&std::fs::read(dir.path().join("f.mesh.json")).unwrap()).unwrap();
    assert_eq!(mesh["h"], 0.125);
    assert_eq!(mesh["n_dof"], 7);
    assert_eq!(mesh["nodes"][0], 0.125);
    assert!(dir.path().join("f.bridge.json").exists());
}

#[test]
fn fem_study_dry_run_checks_reference_size() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "f.toml", "[model]\nJ = 64\n[fem]\nlevels = [0.25, 0.125, 0.0625, 0.03125]\n");
    assert_eq!(code(&run(&["converge-fem", "--config", s(&cfg), "--dry-run"])), 2);
    let cfg = write(&dir, "g.toml", "[model]\nJ = 128\n[fem]\nlevels = [0.25, 0.125, 0.0625, 0.03125]\n");
    assert_eq!(code(&run(&["converge-fem", "--config", s(&cfg), "--dry-run"])), 0);
}
