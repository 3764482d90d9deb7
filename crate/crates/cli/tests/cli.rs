//! End-to-end runs of the `harvest` binary on small grids.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "model.K = 0.3
grid.n_r = 21
grid.n_s = 15
grid.n_e = 3
grid.n_t = 5
sim.n_paths = 400
sim.trace_paths = 2
output.slice_times = [0.0, 0.5]
";

fn harvest(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harvest"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn solve_then_simulate_writes_artifacts() {
    let dir = setup(SMALL);
    let d = dir.path();
    let out = harvest(d, &["--config", "run.toml", "--out", "o", "solve"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["resolved_config.toml", "meta.txt", "field.bin", "regions.bin", "regions.csv", "w_k0_t0_e0.csv"] {
        assert!(d.join("o").join(name).exists(), "{name}");
    }
    let slice = read(&d.join("o"), "w_k0_t0_e0.csv");
    assert_eq!(slice.lines().next(), Some("r,s,w"));
    assert_eq!(slice.lines().count(), 1 + 21 * 15);
    let regions = read(&d.join("o"), "regions.csv");
    assert_eq!(regions.lines().next(), Some("k,step,e,r,s,label,harvest_amount,plant_amount"));
    assert_eq!(regions.lines().count(), 1 + 2 * 21 * 15);
    assert!(read(&d.join("o"), "resolved_config.toml").contains("lambda_cap"));

    let out = harvest(d, &["--config", "run.toml", "--out", "o", "simulate"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read(&d.join("o"), "sim_report.csv");
    assert!(report.starts_with("n_paths,seed,n_sub,filter,j_mc"));
    assert!(read(&d.join("o"), "paths.csv").starts_with("path,time,r,p,q,action,amount"));
}

#[test]
fn missing_k_exits_with_config_error() {
    let dir = setup("model.eta = 1.0\n");
    let out = harvest(dir.path(), &["--config", "run.toml", "solve"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.K"));
    let out = harvest(dir.path(), &["solve"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unreadable_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = harvest(dir.path(), &["--config", "absent.toml", "solve"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn simulate_refuses_a_field_from_another_config() {
    let dir = setup(SMALL);
    let d = dir.path();
    assert_eq!(code(&harvest(d, &["--config", "run.toml", "--out", "o", "solve"])), 0);
    std::fs::write(d.join("other.toml"), SMALL.replace("model.K = 0.3", "model.K = 0.2")).unwrap();
    let out = harvest(d, &["--config", "other.toml", "--out", "o", "simulate"]);
    assert_eq!(code(&out), 4);
    // The seed is not part of the hash.
    let out = harvest(d, &["--config", "run.toml", "--out", "o", "--seed", "9", "simulate"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn same_seed_reproduces_the_report() {
    let dir = setup(SMALL);
    let d = dir.path();
    assert_eq!(code(&harvest(d, &["--config", "run.toml", "--out", "o", "solve"])), 0);
    let mut reports = Vec::new();
    for (seed, threads) in [("5", "1"), ("5", "3"), ("6", "1")] {
        let out = harvest(d, &["--config", "run.toml", "--out", "o", "--seed", seed, "--threads", threads, "-q", "simulate"]);
        assert_eq!(code(&out), 0);
        reports.push(read(&d.join("o"), "sim_report.csv"));
    }
    assert_eq!(reports[0], reports[1]);
    assert_ne!(reports[0], reports[2]);
}

#[test]
fn regions_writes_the_selected_slice() {
    let dir = setup(SMALL);
    let d = dir.path();
    assert_eq!(code(&harvest(d, &["--config", "run.toml", "--out", "o", "solve"])), 0);
    let out = harvest(d, &["--config", "run.toml", "--out", "o", "regions", "--time", "0.5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("plant_and_harvest=0"), "{stdout}");
    let csv = read(&d.join("o"), "regions_k0_t3_e0.csv");
    assert_eq!(csv.lines().count(), 1 + 21 * 15);
    assert!(csv.lines().skip(1).all(|l| !l.contains("PLANT_AND_HARVEST")));
    let out = harvest(d, &["--config", "run.toml", "--out", "o", "regions", "--combo", "99"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn check_catches_an_injected_fault() {
    let dir = setup(SMALL);
    let d = dir.path();
    let out = harvest(d, &["--config", "run.toml", "--out", "o", "--inject-fault", "negative-rate", "-q", "check", "--full"]);
    assert_eq!(code(&out), 5);
    let report = read(&d.join("o"), "check_report.txt");
    assert!(report.lines().any(|l| l.starts_with("FAIL generator_m_matrix")), "{report}");
}
