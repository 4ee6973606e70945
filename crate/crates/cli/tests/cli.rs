use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn sfe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfe")).args(args).output().expect("binary runs")
}

fn run(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let cfg = config("benchmark_nh.toml");
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    sfe(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn forward_writes_fields() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("forward", dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["displacement.csv", "von_mises.csv", "config.toml", "solve_report.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let u = read_csv(&dir.path().join("displacement.csv"));
    let max_ux = u.iter().map(|r| r[3].parse::<f64>().unwrap()).fold(0.0, f64::max);
    assert!(max_ux > 0.1);
}

#[test]
fn invalid_poisson_ratio_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("forward", dir.path(), &["--set", "prior.poisson_ratio=0.7"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nu"));
}

#[test]
fn missing_config_and_unknown_keys_are_config_errors() {
    let o = sfe(&["forward", "--config", "/nonexistent/x.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let o = run("forward", dir.path(), &["--set", "solver.bogus=1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    // clap usage error
    let o = sfe(&["forward"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_data_is_deterministic_and_reproducible_from_echoed_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run("generate-data", a.path(), &["--seed", "42"]).status.success());
    assert!(run("generate-data", b.path(), &["--seed", "42"]).status.success());
    let ya = fs::read(a.path().join("y.csv")).unwrap();
    assert_eq!(ya, fs::read(b.path().join("y.csv")).unwrap());
    assert!(a.path().join("sensors.json").exists());

    let c = tempfile::tempdir().unwrap();
    let echoed = a.path().join("config.toml");
    let o = sfe(&["generate-data", "--config", echoed.to_str().unwrap(), "--out", c.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(ya, fs::read(c.path().join("y.csv")).unwrap());

    let d = tempfile::tempdir().unwrap();
    assert!(run("generate-data", d.path(), &["--seed", "7"]).status.success());
    assert_ne!(ya, fs::read(d.path().join("y.csv")).unwrap());
}

#[test]
fn noiseless_readings_equal_projected_truth() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("generate-data", dir.path(), &["--set", "noise.sigma_e=0.0", "--set", "sensors.preset=medium13"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let y = read_csv(&dir.path().join("y.csv"));
    assert_eq!(y.len(), 26);
    let u = read_csv(&dir.path().join("u_true.csv"));
    for row in &y {
        let node: usize = row[1].parse().unwrap();
        let col = if row[4] == "x" { 3 } else { 4 };
        assert_eq!(row[5], u[node][col]);
    }
}

#[test]
fn euclid_with_three_sensors_reports_insufficient_sensors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("discover", dir.path(), &["--mode", "euclid", "--set", "sensors.preset=sparse3"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("insufficient sensors"));
    assert!(stderr(&o).contains("add sensors"));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["outcome"], "insufficient sensors");
}

#[test]
fn statfem_euclid_writes_populated_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("discover", dir.path(), &["--set", "loop.initial_model=truth"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("W = 0.500*(J1-3) + 1.500*(J3-1)^2"), "{stdout}");
    let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert!(m["eps_w"].is_number() && m["eps_u"].is_number());
    assert_eq!(m["converged"], true);
    for f in ["history.csv", "posterior.json", "posterior_cov.bin", "forecast_mean.csv", "pce.csv", "fields.csv", "discovered_model.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    // the saved model can be re-evaluated
    let again = tempfile::tempdir().unwrap();
    let model = dir.path().join("discovered_model.json");
    let o = run("metrics", again.path(), &["--model", model.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(again.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["eps_w"].as_f64(), Some(0.0));
}

#[test]
fn benchmark_suite_writes_one_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        "benchmark-suite",
        dir.path(),
        &["--presets", "sparse3,medium13", "--sigmas", "1e-3", "--set", "loop.max_iterations=1", "--jobs", "2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(dir.path().join("suite.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header[..5], ["truth", "method", "n_sen", "sigma_e", "model"]);
    assert_eq!(r.records().count(), 4);
}
