//! End-to-end checks of the batch CLI against the shipped configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_optstop")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(dir: &Path, name: &str) -> serde_json::Value {
    let raw = std::fs::read(dir.join(name)).unwrap_or_else(|_| panic!("{name} written"));
    serde_json::from_slice(&raw).expect("valid json")
}

#[test]
fn solve_skipfree_benchmark() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "solve",
        "--config",
        config("skipfree_cap5.json").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let t = json(out.path(), "threshold.json");
    let x_bar = t["x_bar"].as_f64().unwrap();
    assert!((x_bar - 4.8).abs() < 1e-8, "x_bar {x_bar}");
    assert_eq!(t["boundary"], "nonstrict");
    assert_eq!(t["assumption2"]["status"], "certified");
    // Manifest stanza embedded in the payload.
    assert!(t["manifest"]["config_sha256"].as_str().unwrap().len() == 64);

    let curve = std::fs::read_to_string(out.path().join("fcurve.csv")).unwrap();
    let mut lines = curve.lines();
    assert!(lines.next().unwrap().starts_with("# seed="));
    assert_eq!(lines.next().unwrap(), "y,f,ci_low,ci_high,variant");
    assert!(curve.lines().count() > 10);
}

#[test]
fn rerun_is_byte_identical() {
    let out1 = tempfile::tempdir().unwrap();
    let out2 = tempfile::tempdir().unwrap();
    for (out, threads) in [(&out1, "1"), (&out2, "4")] {
        let o = run(&[
            "solve",
            "--config",
            config("skipfree_cap5.json").to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(o.status.success());
    }
    // Payloads byte-identical across reruns and worker counts; only
    // manifest.json carries the timestamp.
    for name in ["threshold.json", "fcurve.csv"] {
        let a = std::fs::read(out1.path().join(name)).unwrap();
        let b = std::fs::read(out2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
}

#[test]
fn seed_override_changes_hashless_payloads_only_via_rng() {
    let out1 = tempfile::tempdir().unwrap();
    let o = run(&[
        "solve",
        "--config",
        config("gaussian_cap5.json").to_str().unwrap(),
        "--out",
        out1.path().to_str().unwrap(),
        "--seed",
        "42",
    ]);
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let t = json(out1.path(), "threshold.json");
    assert_eq!(t["manifest"]["seed"].as_u64().unwrap(), 42);
}

#[test]
fn oracle_dp_verdict_matches() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "oracle-dp",
        "--config",
        config("skipfree_cap5.json").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let v = json(out.path(), "dp_verdict.json");
    assert_eq!(v["stopping_set_matches_threshold_rule"], true);
    let dp = std::fs::read_to_string(out.path().join("dp.csv")).unwrap();
    assert!(dp
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("state,V,gamma,stopping"));
}

#[test]
fn check_identity_passes_on_both_instances() {
    for cfg in ["skipfree_cap5.json", "bm_softplus.json"] {
        let out = tempfile::tempdir().unwrap();
        let o = run(&[
            "check-identity",
            "--config",
            config(cfg).to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
        ]);
        assert!(
            o.status.success(),
            "{cfg} stderr: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let v = json(out.path(), "identity.json");
        for check in v["checks"].as_array().unwrap() {
            assert_eq!(check["passes"], true, "{cfg}: {check}");
        }
    }
}

#[test]
fn solve_compound_poisson_via_difference_quotient() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "solve",
        "--config",
        config("cpp_softplus.json").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let t = json(out.path(), "threshold.json");
    let x_bar = t["x_bar"].as_f64().unwrap();
    // MC difference-quotient root; loose band around the level-sequence limit.
    assert!((-0.45..=-0.05).contains(&x_bar), "x_bar {x_bar}");
    assert_eq!(t["assumption2"]["status"], "certified");
}

#[test]
fn discretize_writes_convergence_report() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "discretize",
        "--config",
        config("bm_softplus.json").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
        "--levels",
        "1,2,3",
    ]);
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let v = json(out.path(), "discretization.json");
    assert_eq!(v["monotone_values_ok"], true);
    assert_eq!(v["monotone_thresholds_ok"], true);
    let thresholds = v["thresholds"].as_array().unwrap();
    assert_eq!(thresholds.len(), 3);
    assert!((thresholds[0].as_f64().unwrap() + 0.25).abs() < 5e-3);
    assert!(out.path().join("discretization.csv").exists());
    assert!(out.path().join("fn_residuals.csv").exists());
}

#[test]
fn solve_finite_chain_reports_state_bracket() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "solve",
        "--config",
        config("chain_three_state.json").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(
        o.status.code() == Some(0) || o.status.code() == Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let t = json(out.path(), "threshold.json");
    let bracket = t["bracket"].as_array().unwrap();
    // The root bracket must be a pair of adjacent chain states.
    let lo = bracket[0].as_f64().unwrap();
    let hi = bracket[1].as_f64().unwrap();
    assert!(lo < hi && (0.0..=3.0).contains(&lo) && (0.0..=3.0).contains(&hi));
}

#[test]
fn validate_rejects_decreasing_payoff() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "validate",
        "--config",
        config("decreasing_gamma.json").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(
        stderr.contains("monotonicity violation"),
        "stderr: {stderr}"
    );
    let d = json(out.path(), "diagnostics.json");
    assert_eq!(d["gamma_monotone"], false);
    assert_eq!(d["passes"], false);
}

#[test]
fn validate_accepts_benchmark() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "validate",
        "--config",
        config("skipfree_cap5.json").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let d = json(out.path(), "diagnostics.json");
    assert_eq!(d["drift_positive"], true);
    assert_eq!(d["transient_ok"], true);
}

#[test]
fn malformed_config_exits_one_with_location() {
    let out = tempfile::tempdir().unwrap();
    let bad = out.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"process\": {\"kind\": \"two_point\",\n").unwrap();
    let o = run(&[
        "solve",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(
        stderr.contains("line"),
        "message not line-anchored: {stderr}"
    );
}

#[test]
fn fcurve_emits_hat_for_levy() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "f-curve",
        "--config",
        config("bm_softplus.json").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
        "--grid",
        "-2:2:9",
    ]);
    assert!(o.status.success());
    let hat = std::fs::read_to_string(out.path().join("hat.csv")).unwrap();
    assert!(hat
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("y,h_hat,ci_low,ci_high,method"));
    for line in hat.lines().skip(2) {
        let cols: Vec<&str> = line.split(',').collect();
        let v: f64 = cols[1].parse().unwrap();
        assert!((v - 0.5).abs() < 1e-9, "ĥ = {v}");
        assert_eq!(cols[4], "analytic_bm");
    }
}
