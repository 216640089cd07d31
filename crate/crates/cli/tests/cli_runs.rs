//! End-to-end runs of the `maskdiff` binary: exit codes, determinism across
//! thread counts, seed precedence, and output shapes.

use std::path::Path;
use std::process::{Command, Output};

fn maskdiff(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_maskdiff"));
    cmd.args(args);
    cmd.env_remove("MASKDIFF_SEED");
    cmd
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn small_potts_config(dir: &Path) -> String {
    write_config(
        dir,
        "small.json",
        r#"{
            "distribution": {"type": "potts", "k": 2, "l": 6, "j": 1.0986122886681098},
            "schedule": {"type": "balanced", "t": 3},
            "n_samples": 4000,
            "seed": 11
        }"#,
    )
}

fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn verify_quick_passes_with_default_seed() {
    let output = maskdiff(&["verify", "--scope", "quick"]).output().unwrap();
    assert_exit(&output, 0);
    let report: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("JSON report on stdout");
    assert_eq!(report["passed"], true);
    assert!(report["n_checks"].as_u64().unwrap() > 100);
    for check in report["checks"].as_array().unwrap() {
        assert!(check["residual"].as_f64().unwrap() <= check["tolerance"].as_f64().unwrap());
    }
}

#[test]
fn tampered_verify_fails_with_exit_one() {
    let output = maskdiff(&["verify", "--tamper"]).output().unwrap();
    assert_exit(&output, 1);
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(report["passed"], false);
    let failing: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["pass"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    // Mislabeling a perturbed predictor as optimal must break the decoupling
    // identity, and each failure carries a replayable instance.
    assert!(failing.contains(&"decoupling"));
    for check in report["checks"].as_array().unwrap() {
        if check["pass"] == false {
            assert!(check["replay"].is_object());
        }
    }
}

#[test]
fn missing_config_is_a_configuration_error() {
    let output = maskdiff(&["bounds"]).output().unwrap();
    assert_exit(&output, 2);
    let output = maskdiff(&["sweep-t", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_exit(&output, 2);
}

#[test]
fn invalid_schedule_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "bad.json",
        r#"{
            "distribution": {"type": "potts", "k": 2, "l": 4, "j": 1.0},
            "schedule": {"type": "explicit", "sizes": [3, 3]}
        }"#,
    );
    let output = maskdiff(&["bounds", "--config", &config]).output().unwrap();
    assert_exit(&output, 2);
}

#[test]
fn table_guard_is_a_resource_error() {
    let dir = tempfile::tempdir().unwrap();
    let table = write_config(dir.path(), "table.csv", "0,0,0,0,0,1.0\n");
    let config = write_config(
        dir.path(),
        "huge.json",
        &format!(
            r#"{{
                "distribution": {{"type": "tabular", "path": "{table}", "k": 100}},
                "schedule": {{"type": "balanced", "t": 1}}
            }}"#
        ),
    );
    let output = maskdiff(&["bounds", "--config", &config]).output().unwrap();
    assert_exit(&output, 3);
}

#[test]
fn sweep_output_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_potts_config(dir.path());
    let out1 = dir.path().join("a.csv");
    let out2 = dir.path().join("b.csv");
    for (threads, out) in [("1", &out1), ("4", &out2)] {
        let output = maskdiff(&[
            "sweep-t",
            "--config",
            &config,
            "--t",
            "2,3,6",
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
        assert_exit(&output, 0);
    }
    let a = std::fs::read(&out1).unwrap();
    let b = std::fs::read(&out2).unwrap();
    assert_eq!(a, b, "CSV must be byte-identical regardless of threads");
}

#[test]
fn sweep_rows_respect_the_simple_bound() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_potts_config(dir.path());
    let out = dir.path().join("rows.csv");
    let output = maskdiff(&[
        "sweep-t",
        "--config",
        &config,
        "--t",
        "1,2,3,6",
        "--out",
        out.to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert_exit(&output, 0);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "k,l,j,t,s_max,policy,n_samples,seed,kl_estimate,kl_stderr,mi_sum,eps_train,thm1_upper,corollary_upper,refined_upper,lower_bound"
    );
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let kl: f64 = fields[8].parse().unwrap();
        let stderr: f64 = fields[9].parse().unwrap();
        let thm1: f64 = fields[12].parse().unwrap();
        assert!(kl >= -3.0 * stderr - 1e-12, "row: {line}");
        assert!(kl <= thm1 + 3.0 * stderr + 1e-12, "row: {line}");
        for field in &fields[8..] {
            assert!(field.parse::<f64>().unwrap().is_finite());
        }
    }
}

#[test]
fn sweep_json_format_includes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_potts_config(dir.path());
    let output = maskdiff(&[
        "sweep-j",
        "--config",
        &config,
        "--j",
        "0.0,0.5,1.0",
        "--t",
        "3",
        "--format",
        "json",
    ])
    .output()
    .unwrap();
    assert_exit(&output, 0);
    let parsed: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(parsed["rows"].as_array().unwrap().len(), 3);
    assert!(parsed["summary"]["pearson_r"].as_f64().is_some());
}

#[test]
fn single_j_correlation_is_flagged_undefined() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_potts_config(dir.path());
    let output = maskdiff(&[
        "sweep-j",
        "--config",
        &config,
        "--j",
        "1.0",
        "--t",
        "3",
        "--format",
        "json",
    ])
    .output()
    .unwrap();
    assert_exit(&output, 0);
    let parsed: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert!(parsed["summary"]["pearson_r"].is_null());
    assert!(parsed["summary"]["flag"].as_str().unwrap().contains("undefined"));
}

#[test]
fn independent_tokens_sweep_is_zero_and_slope_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "j0.json",
        r#"{
            "distribution": {"type": "potts", "k": 3, "l": 6, "j": 0.0},
            "schedule": {"type": "balanced", "t": 3},
            "n_samples": 2000,
            "seed": 5
        }"#,
    );
    let output = maskdiff(&[
        "sweep-t", "--config", &config, "--t", "2,3,6", "--format", "json",
    ])
    .output()
    .unwrap();
    assert_exit(&output, 0);
    let parsed: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    for row in parsed["rows"].as_array().unwrap() {
        let kl = row["kl_estimate"].as_f64().unwrap();
        let stderr = row["kl_stderr"].as_f64().unwrap();
        assert!(kl.abs() <= 3.0 * stderr + 1e-12, "kl {kl} stderr {stderr}");
    }
    assert!(parsed["summary"]["slope"].is_null());
    assert!(parsed["summary"]["flag"].as_str().unwrap().contains("undefined"));
    assert_eq!(parsed["summary"]["excluded_t"].as_array().unwrap().len(), 3);
}

#[test]
fn bounds_reports_pair_values() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "pair.json",
        r#"{
            "distribution": {"type": "potts", "k": 2, "l": 2, "j": 1.0986122886681098},
            "schedule": {"type": "explicit", "sizes": [2]}
        }"#,
    );
    let output = maskdiff(&["bounds", "--config", &config]).output().unwrap();
    assert_exit(&output, 0);
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let thm1 = report["thm1_upper"].as_f64().unwrap();
    assert!((thm1 - 0.130812).abs() < 1e-6, "thm1 {thm1}");
    assert_eq!(report["eps_train"].as_f64().unwrap(), 0.0);

    let balanced = write_config(
        dir.path(),
        "balanced.json",
        r#"{
            "distribution": {"type": "potts", "k": 3, "l": 20, "j": 1.0},
            "schedule": {"type": "balanced", "t": 10}
        }"#,
    );
    let output = maskdiff(&["bounds", "--config", &balanced]).output().unwrap();
    assert_exit(&output, 0);
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(report["corollary_c1"].as_f64().unwrap(), 1.0);
}

#[test]
fn seed_precedence_flag_env_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_potts_config(dir.path());
    let run = |seed_args: &[&str], env: Option<&str>| -> Vec<u8> {
        let mut cmd = maskdiff(
            &[&["sample", "--config", &config, "--count", "4"], seed_args].concat(),
        );
        if let Some(v) = env {
            cmd.env("MASKDIFF_SEED", v);
        }
        let output = cmd.output().unwrap();
        assert_exit(&output, 0);
        output.stdout
    };
    let from_config = run(&[], None);
    let from_env = run(&[], Some("999"));
    let from_flag = run(&["--seed", "999"], None);
    let flag_beats_env = run(&["--seed", "11"], Some("999"));
    assert_ne!(from_config, from_env, "env seed must override config");
    assert_eq!(from_env, from_flag, "flag and env with same seed agree");
    assert_eq!(from_config, flag_beats_env, "flag must override env");

    let bad_env = maskdiff(&["sample", "--config", &config])
        .env("MASKDIFF_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_exit(&bad_env, 2);
}

#[test]
fn sample_writes_step_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_potts_config(dir.path());
    let log = dir.path().join("steps.csv");
    let output = maskdiff(&[
        "sample",
        "--config",
        &config,
        "--count",
        "2",
        "--out",
        log.to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert_exit(&output, 0);
    // Two runs of six tokens each on stdout.
    let stdout = String::from_utf8(output.stdout).unwrap();
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert_eq!(row.split_whitespace().count(), 6);
    }
    // Step log: header + 2 runs x 3 steps.
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "run,t,revealed,step_log_prob");
    assert_eq!(lines.len(), 1 + 2 * 3);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "0");
    assert_eq!(fields[1], "3");
    assert_eq!(fields[2].split_whitespace().count(), 2);
    assert!(fields[3].parse::<f64>().unwrap() <= 0.0);
}

#[test]
fn sample_json_format_round_trips_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_potts_config(dir.path());
    let output = maskdiff(&[
        "sample", "--config", &config, "--count", "1", "--format", "json",
    ])
    .output()
    .unwrap();
    assert_exit(&output, 0);
    let parsed: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let run = &parsed[0];
    assert_eq!(run["tokens"].as_array().unwrap().len(), 6);
    // Trajectory serializes as reverse-time increments: 3 steps of 2.
    let traj = run["trajectory"].as_array().unwrap();
    assert_eq!(traj.len(), 3);
    for inc in traj {
        assert_eq!(inc.as_array().unwrap().len(), 2);
    }
}

#[test]
fn bounds_rejects_csv_format() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_potts_config(dir.path());
    let output = maskdiff(&["bounds", "--config", &config, "--format", "csv"])
        .output()
        .unwrap();
    assert_exit(&output, 2);
}
