use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

const GAUSSIAN: &str = r#"{
    "name": "smoke",
    "grid": { "T": 0.5, "T0": 1.0, "N": 8 },
    "monte_carlo": { "n_scenarios": 50, "seed": 4 },
    "z_grid": { "window": [-1.0, 1.0], "nodes": 3 },
    "export": { "scenarios": 2 }
}"#;

fn insider(args: &[&str], dir: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_insider"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn donsker_smoke_emits_field_csv() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "g.json", GAUSSIAN);
    let (code, err) = insider(&["donsker", "--config", &cfg], tmp.path());
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(tmp.path().join("out/smoke/fields/donsker.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# config-hash: "));
    assert_eq!(lines.next().unwrap(), "scenario,t,z,M,M_B,Phi");
    assert!(lines.count() > 10);
    assert!(tmp.path().join("out/smoke/timings.json").exists());
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "g.json", GAUSSIAN);
    let report = tmp.path().join("out/smoke/report.json");
    assert_eq!(insider(&["adjoint", "--config", &cfg], tmp.path()).0, 0);
    let first = std::fs::read(&report).unwrap();
    assert_eq!(insider(&["adjoint", "--config", &cfg, "--threads", "1"], tmp.path()).0, 0);
    assert_eq!(first, std::fs::read(&report).unwrap());
    assert_eq!(insider(&["adjoint", "--config", &cfg, "--seed", "5"], tmp.path()).0, 0);
    assert_ne!(first, std::fs::read(&report).unwrap());
}

#[test]
fn volatility_below_floor_exits_2() {
    let tmp = TempDir::new().unwrap();
    let body = GAUSSIAN.replace(
        r#""export""#,
        r#""market": {
            "b0": { "preset": "constant", "value": 0.1 },
            "sigma0": { "preset": "linear_in_t", "a": 1.0, "b": -1.9 },
            "c0": 0.1, "x0": 1.0, "utility": { "name": "log" } },
        "export""#,
    );
    let cfg = write(tmp.path(), "bad.json", &body);
    let (code, err) = insider(&["portfolio", "--config", &cfg], tmp.path());
    assert_eq!(code, 2);
    assert!(err.contains("market.sigma0") && err.contains("bounded away from 0"), "{err}");
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "typo.json", &GAUSSIAN.replace("n_scenarios", "n_scenario"));
    let (code, err) = insider(&["simulate", "--config", &cfg], tmp.path());
    assert_eq!(code, 2);
    assert!(err.contains("monte_carlo"), "{err}");

    let (code, _) = insider(&["simulate", "--config", "/nonexistent.json"], tmp.path());
    assert_eq!(code, 2);
    let (code, _) = insider(&["adjoint"], tmp.path());
    assert_eq!(code, 2);
}

#[test]
fn failed_check_exits_3() {
    let tmp = TempDir::new().unwrap();
    // u = 1.5 is far from the LQ optimum u = 1/2.
    let body = GAUSSIAN.replace(r#""export""#, r#""control": { "preset": "constant", "value": 1.5 }, "export""#);
    let cfg = write(tmp.path(), "off.json", &body);
    let (code, err) = insider(&["check", "--config", &cfg], tmp.path());
    assert_eq!(code, 3, "{err}");
}

#[test]
fn portfolio_on_jumps_is_refused() {
    let tmp = TempDir::new().unwrap();
    let body = GAUSSIAN.replace(
        r#""export""#,
        r#""levy": { "intensity": 1.0, "marks": [ { "size": 0.2, "prob": 1.0 } ] },
        "market": {
            "b0": { "preset": "constant", "value": 0.0 },
            "sigma0": { "preset": "constant", "value": 1.0 },
            "c0": 0.5, "x0": 1.0, "utility": { "name": "log" } },
        "export""#,
    );
    let cfg = write(tmp.path(), "jumps.json", &body);
    assert_eq!(insider(&["portfolio", "--config", &cfg], tmp.path()).0, 2);
}

#[test]
fn validate_subset_writes_report() {
    let tmp = TempDir::new().unwrap();
    let (code, err) = insider(&["validate", "--only", "1,2"], tmp.path());
    assert_eq!(code, 0, "{err}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("out/validate/report.json")).unwrap()).unwrap();
    assert_eq!(report["checks"].as_array().unwrap().len(), 2);
    assert_eq!(report["passed"], true);
}
