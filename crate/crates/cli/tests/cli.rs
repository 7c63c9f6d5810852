use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qkd_core::bounds::{expected_observables, security_result};
use qkd_core::channel::ChannelModel;
use qkd_core::postprocessing::n_ec;
use qkd_core::ProtocolConstants;
use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn qkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkd")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Compares against a pinned file; `QKD_BLESS=1` rewrites it.
fn check_golden(name: &str, actual: &str) {
    let file = golden(name);
    if std::env::var_os("QKD_BLESS").is_some() {
        fs::write(&file, actual).unwrap();
    }
    let expected = fs::read_to_string(&file).unwrap();
    assert_eq!(actual, expected, "{name} drifted; rerun with QKD_BLESS=1 if intended");
}

#[test]
fn keyrate_20db_matches_engine() {
    let o = qkd(&["keyrate", "--params", path(&config("params-20db.json")), "--channel", path(&config("channel-20db.json"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["command"], "keyrate");

    let c = ProtocolConstants::from_json_file(config("params-20db.json")).unwrap();
    let ch = ChannelModel::from_json_file(config("channel-20db.json")).unwrap();
    let exp = expected_observables(&c, &ch);
    let obs = exp.rounded();
    let r = security_result(&c, &obs, &exp, n_ec(obs.n_sift, c.e_bit_assumed, 1.16).unwrap()).unwrap();
    assert!(r.n_fin > 0);
    let got = &report["result"];
    assert_eq!(got["n_fin"].as_i64().unwrap(), r.n_fin);
    assert_eq!(got["n1z_lower"].as_u64().unwrap(), r.n1z_lower);
    assert_eq!(got["nph_upper"].as_u64().unwrap(), r.nph_upper);
    assert_eq!(got["n_pa"].as_u64().unwrap(), r.n_pa);
    assert_eq!(got["n1z"]["decoy"]["lambda"].as_f64().unwrap(), r.n1z.decoy.lambda);
    assert_eq!(got["budget_trail"].as_array().unwrap().len(), r.budget_trail.len());
    assert_eq!(report["config"]["params"]["eps_secrecy"].as_f64().unwrap(), 1e-10);
}

#[test]
fn keyrate_report_is_pinned() {
    let o = qkd(&["keyrate", "--params", path(&config("params-1e6.json")), "--channel", path(&config("channel-lossless.json"))]);
    assert_eq!(code(&o), 0);
    check_golden("keyrate-1e6.json", &String::from_utf8(o.stdout).unwrap());
}

#[test]
fn keyrate_from_observables_alone() {
    let o = qkd(&["keyrate", "--params", path(&config("params-1e6.json")), "--observables", path(&config("observables-1e6.json"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["result"]["n_fin"].as_i64().unwrap() > 0);
    assert!(report["config"]["channel"].is_null());
}

#[test]
fn keyrate_usage_errors() {
    let o = qkd(&["keyrate", "--params", "/nonexistent/params.json", "--channel", path(&config("channel-20db.json"))]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&qkd(&["keyrate", "--params", path(&config("params-20db.json"))])), 1);
    assert_eq!(code(&qkd(&["keyrate"])), 1);
    assert_eq!(code(&qkd(&["no-such-command"])), 1);
    assert_eq!(code(&qkd(&["--help"])), 0);
}

#[test]
fn absurd_error_rate_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let mut params: Value = serde_json::from_str(&fs::read_to_string(config("params-1e6.json")).unwrap()).unwrap();
    params["e_bit_assumed"] = 0.5.into();
    let p = dir.path().join("params.json");
    fs::write(&p, params.to_string()).unwrap();
    let o = qkd(&["keyrate", "--params", path(&p), "--channel", path(&config("channel-lossless.json"))]);
    assert_eq!(code(&o), 2);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    let r = &report["result"];
    assert!(r["n_ec"].as_u64().unwrap() >= r["n_sift"].as_u64().unwrap());
    assert_eq!(r["abort"], true);
}

fn simulate(dir: &Path, extra: &[&str]) -> Output {
    let (params, channel) = (config("params-1e5.json"), config("channel-lossless.json"));
    let mut args = vec!["simulate", "--params", path(&params), "--channel", path(&channel), "--out", path(dir)];
    args.extend(extra);
    qkd(&args)
}

#[test]
fn simulate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&simulate(a.path(), &["--seed", "3", "--debug-trace"])), 0);
    assert_eq!(code(&simulate(b.path(), &["--seed", "3", "--debug-trace"])), 0);
    for f in ["alice.key", "bob.key", "transcript.bin", "report.json", "trace.tsv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(a.path().join("alice.key")).unwrap(), fs::read(a.path().join("bob.key")).unwrap());
    let report: Value = serde_json::from_slice(&fs::read(a.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["outcome"], "key");
    assert_eq!(report["keys_equal"], true);
    assert_eq!(report["config"]["params"]["n_total"], 100_000);
    let key = fs::read_to_string(a.path().join("alice.key")).unwrap();
    assert_eq!(key.trim().len() * 4, report["key_length"].as_u64().unwrap().div_ceil(8) as usize * 8);
    let trace = fs::read_to_string(a.path().join("trace.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 100_001);

    let c = tempfile::tempdir().unwrap();
    assert_eq!(code(&simulate(c.path(), &["--seed", "4"])), 0);
    assert_ne!(fs::read(a.path().join("transcript.bin")).unwrap(), fs::read(c.path().join("transcript.bin")).unwrap());
    assert!(!c.path().join("trace.tsv").exists());
}

#[test]
fn tampering_aborts_at_verification() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(dir.path(), &["--seed", "3", "--tamper"]);
    assert_eq!(code(&o), 2);
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["outcome"], "aborted-verification");
    assert_eq!(report["config"]["tamper"], true);
    assert_eq!(fs::read_to_string(dir.path().join("alice.key")).unwrap(), "\n");
}

fn scan(grid: &str) -> (i32, String) {
    let o = qkd(&["scan", "--params", path(&config("params-20db.json")), "--channel", path(&config("channel-fiber.json")), "--grid", grid]);
    (code(&o), String::from_utf8(o.stdout).unwrap())
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn scan_two_points() {
    let (c, csv) = scan("0,50");
    assert_eq!(c, 0);
    let data: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data.len(), 3);
    assert_eq!(data[0], "distance_km,eta_ch,N_fin,rate_per_pulse,eps_total");
    let config: Value = serde_json::from_str(csv.lines().next().unwrap().trim_start_matches("# ")).unwrap();
    assert_eq!(config["schema_version"], 1);
    assert_eq!(config["grid"].as_array().unwrap().len(), 2);
}

#[test]
fn scan_rate_is_monotone_and_clamped() {
    let (c, csv) = scan("0:250:10");
    assert_eq!(c, 0);
    let rows = rows(&csv);
    let rates: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(rates.windows(2).all(|w| w[1] <= w[0]), "{rates:?}");
    assert!(rates[0] > 0.0);
    let dead = rows.iter().find(|r| r[2].parse::<i64>().unwrap() <= 0).expect("key vanishes at long range");
    assert_eq!(dead[3].parse::<f64>().unwrap(), 0.0);
    check_golden("scan-20db.csv", &scan("0:200:25").1);
}

#[test]
fn scan_rejects_bad_input() {
    assert_eq!(scan("0:10").0, 1);
    let o = qkd(&["scan", "--params", path(&config("params-20db.json")), "--channel", path(&config("channel-20db.json"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn verify_bounds_reports() {
    let o = qkd(&["verify-bounds", "--suite", "fock,kato-plugback", "--seed", "77", "--trials", "20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports: Vec<Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r["pass"] == true));
    assert_eq!(reports[1]["seed"], 77);
}

#[test]
fn verify_bounds_failures_and_usage() {
    assert_eq!(code(&qkd(&["verify-bounds", "--suite", ""])), 1);
    assert_eq!(code(&qkd(&["verify-bounds", "--suite", "nope"])), 1);
    // One sabotaged trial that happens to pass verification with unequal keys.
    let o = qkd(&["verify-bounds", "--suite", "correctness", "--trials", "1", "--seed", "425"]);
    assert_eq!(code(&o), 3);
    let reports: Vec<Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(reports[0]["violations"], 1);
}

#[test]
fn million_pulse_run_is_quick() {
    let dir = tempfile::tempdir().unwrap();
    let (params, channel) = (config("params-1e6.json"), config("channel-lossless.json"));
    let start = std::time::Instant::now();
    let o = qkd(&["simulate", "--params", path(&params), "--channel", path(&channel), "--seed", "1", "--out", path(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed().as_secs() < 60);
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["key_length"].as_u64().unwrap() > 1_000);
}
