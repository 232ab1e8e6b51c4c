use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn cbelr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbelr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cbelr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    cbelr(args).status.code().unwrap()
}

fn simulated(dir: &TempDir, name: &str, seed: &str) -> String {
    let path = dir.path().join(name);
    let p = path.to_str().unwrap();
    ok(&["simulate", "--f0", "exp(0.8)", "--f1", "exp(1)", "--n", "150", "--seed", seed, "--output", p]);
    p.to_string()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_reproducible() {
    let a = ok(&["simulate", "--f0", "ln(0,1)", "--n", "40", "--seed", "3"]);
    let b = ok(&["simulate", "--f0", "ln(0,1)", "--n", "40", "--seed", "3"]);
    let c = ok(&["simulate", "--f0", "ln(0,1)", "--n", "40", "--seed", "4"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.starts_with("group,d,y\n"));
    assert_eq!(a.lines().count(), 81);
}

#[test]
fn seed_is_required_for_stochastic_commands() {
    assert_eq!(code(&["simulate", "--f0", "exp(1)"]), 2);
    assert_eq!(code(&["experiment", "--f0", "exp(1)", "--reps", "2"]), 2);
    let dir = TempDir::new().unwrap();
    let data = simulated(&dir, "d.csv", "1");
    assert_eq!(code(&["bootstrap", "--input", &data]), 2);
}

#[test]
fn test_emits_statistic_df_and_p_value() {
    let dir = TempDir::new().unwrap();
    let data = simulated(&dir, "d.csv", "5");
    let out = ok(&["test", "--input", &data, "--q-basis", "y", "--r-basis", "y", "--level", "0.05"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    let elr = &v["tests"][0];
    assert_eq!(elr["method"], "ELR");
    assert!(elr["statistic"].as_f64().unwrap() >= 0.0);
    assert_eq!(elr["df"].as_f64(), Some(1.0));
    let p = elr["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(v["spec"]["q_basis"], "y");
    assert_eq!(v["level"].as_f64(), Some(0.05));
}

#[test]
fn baselines_add_four_rows() {
    let dir = TempDir::new().unwrap();
    let data = simulated(&dir, "d.csv", "6");
    let out = ok(&["test", "--input", &data, "--baselines", "--format", "csv"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "method,statistic,df,p_value,reject");
    assert_eq!(lines.len(), 6);
    for name in ["ELR", "t-test", "Wilcoxon", "KS", "Cai's ELR"] {
        assert!(out.contains(name), "{name}");
    }
}

#[test]
fn select_reports_nine_cells() {
    let dir = TempDir::new().unwrap();
    let data = simulated(&dir, "d.csv", "7");
    let v: Value = serde_json::from_str(&ok(&["select", "--input", &data])).unwrap();
    assert_eq!(v["cells"].as_array().unwrap().len(), 9);
    let table = ok(&["select", "--input", &data, "--format", "table"]);
    assert_eq!(table.matches('*').count(), 1);
}

#[test]
fn bic_choice_feeds_the_test() {
    let dir = TempDir::new().unwrap();
    let data = simulated(&dir, "d.csv", "7");
    let sel: Value = serde_json::from_str(&ok(&["select", "--input", &data])).unwrap();
    let test: Value = serde_json::from_str(&ok(&["test", "--input", &data, "--q-basis", "bic", "--r-basis", "bic"])).unwrap();
    assert_eq!(sel["selected"], test["spec"]);
}

#[test]
fn fit_dump_has_residuals_and_cdf() {
    let dir = TempDir::new().unwrap();
    let data = simulated(&dir, "d.csv", "8");
    let cdf = dir.path().join("cdf.csv");
    let out = ok(&["fit", "--input", &data, "--cdf-output", path_str(&cdf)]);
    let v: Value = serde_json::from_str(&out).unwrap();
    let fits = v["fits"].as_array().unwrap();
    assert_eq!(fits.len(), 2);
    for f in fits {
        for key in ["c1_sum", "c1_tilted_sum", "c2_eta0", "c2_eta1", "eta0", "eta1", "theta", "phi0", "phi1"] {
            assert!(f.get(key).is_some(), "missing {key}");
        }
        assert!(f["c1_sum"].as_f64().unwrap().abs() < 1e-6);
    }
    assert_eq!(fits[1]["null_restricted"], true);
    let cdf = fs::read_to_string(cdf).unwrap();
    assert!(cdf.starts_with("y,F0,F1\n"));
    let last: Vec<f64> = cdf.lines().last().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    assert!((last[1] - 1.0).abs() < 1e-9 && (last[2] - 1.0).abs() < 1e-9);
}

#[test]
fn experiment_config_flags_override_and_reproduce() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("null_exp.cfg");
    fs::write(&cfg, "# null design\nf0 = exp(1)\nf1 = exp(1)\nn = 80\nreps = 50\nseed = 1\n").unwrap();
    let c = path_str(&cfg);
    let args = ["experiment", "--config", c, "--reps", "3", "--seed", "7", "--methods", "elr,t,ks"];
    let a = ok(&args);
    let b = ok(&args);
    assert_eq!(a, b);
    let v: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["reps"], 3);
    assert_eq!(v["seed"], 7);
    let methods = v["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 3);
    assert!(methods.iter().all(|m| m["rejection_rate"].as_f64().is_some()));

    let seq = ok(&["experiment", "--config", c, "--reps", "3", "--seed", "7", "--methods", "elr,t,ks", "--sequential"]);
    assert_eq!(a, seq);
}

#[test]
fn experiment_rejects_bad_configuration() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "f0 = exp(1)\nunknown_key = 3\n").unwrap();
    assert_eq!(code(&["experiment", "--config", path_str(&cfg), "--seed", "1"]), 2);
    assert_eq!(code(&["experiment", "--f0", "exp(1)", "--seed", "1", "--level", "1"]), 2);
    assert_eq!(code(&["experiment", "--f0", "exp(1)", "--seed", "1", "--epsilon", "0"]), 2);
}

#[test]
fn bootstrap_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let data = simulated(&dir, "d.csv", "9");
    let args = ["bootstrap", "--input", &data, "--bootstrap-b", "4", "--seed", "2"];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    let v: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
    assert_eq!(v["low_precision"], true);
}

#[test]
fn categorize_recodes_attempts() {
    let dir = TempDir::new().unwrap();
    let raw = dir.path().join("raw.csv");
    fs::write(&raw, "group,attempts,y\n0,1,2.5\n0,5,1.0\n1,,\n1,3,0.7\n").unwrap();
    let out = ok(&["categorize", "--input", path_str(&raw)]);
    assert_eq!(out, "group,d,y\n0,1,2.5\n0,2,1.0\n1,3,\n1,1,0.7\n");
    fs::write(&raw, "group,attempts,y\n0,9,2.5\n").unwrap();
    assert_ne!(code(&["categorize", "--input", path_str(&raw)]), 0);
}

#[test]
fn usage_and_runtime_errors_are_nonzero() {
    assert_eq!(code(&["test", "--bogus"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["test", "--input", "/nonexistent/data.csv"]), 1);
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "group,d,y\n0,1,3.2\n0,2,\n1,3,\n").unwrap();
    let out = cbelr(&["test", "--input", path_str(&bad), "--m", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(callback_elr_cli::run_cli(["cbelr", "--help"]), 0);
    assert_eq!(callback_elr_cli::run_cli(["cbelr", "test", "--frob"]), 2);
}

#[test]
fn output_file_matches_stdout() {
    let dir = TempDir::new().unwrap();
    let data = simulated(&dir, "d.csv", "10");
    let out = dir.path().join("r.json");
    let stdout = ok(&["test", "--input", &data]);
    ok(&["test", "--input", &data, "--output", path_str(&out)]);
    assert_eq!(fs::read_to_string(out).unwrap(), stdout);
}
