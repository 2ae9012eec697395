//! CLI behavior: exit codes, diagnostics, file outputs.

use std::path::Path;
use std::process::{Command, Output};

fn drainctl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drainctl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn version_carries_table_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let out = drainctl(&["--version"], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(
        text.contains("parameter tables sha256:"),
        "version line: {text}"
    );
}

#[test]
fn missing_scenario_column_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "time_s,q_in4,q_in5,q_in6\n0,0,0,0\n300,0,0,0\n").unwrap();
    let out = drainctl(
        &["simulate", "--scenario", "bad.csv", "--controller", "rbc"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.starts_with("error[schema]:"), "stderr: {err}");
    assert!(err.contains("q_md_mi"), "stderr: {err}");
}

#[test]
fn unknown_template_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    std::fs::write(&csv, "x,y\n1,2\n2,4\n").unwrap();
    let out = drainctl(
        &[
            "fit",
            "--data",
            "d.csv",
            "--template",
            "spline",
            "--target",
            "y",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown template"));
}

#[test]
fn degenerate_design_exits_2_with_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flat.csv");
    std::fs::write(&csv, "x,y\n3,1\n3,2\n3,3\n").unwrap();
    let out = drainctl(
        &[
            "fit",
            "--data",
            "flat.csv",
            "--template",
            "linear",
            "--target",
            "y",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("rank deficient"), "stderr: {err}");
    assert!(err.contains("intercept"), "stderr: {err}");
}

#[test]
fn fit_writes_result_and_summary_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = String::from("q_in6,q_1216\n");
    for i in 0..50 {
        let x = 1.0 + 20.0 * i as f64 / 49.0;
        let y = 0.003 * x * x + 0.921 * x - 0.538;
        rows.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(dir.path().join("d.csv"), rows).unwrap();
    let out = drainctl(
        &[
            "fit",
            "--data",
            "d.csv",
            "--template",
            "quadratic",
            "--target",
            "q_1216",
            "--out",
            "fit.json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("RMSE"), "summary row missing: {text}");
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap())
            .unwrap();
    let params = doc["fit"]["params"].as_array().unwrap();
    assert!((params[0].as_f64().unwrap() - 0.003).abs() < 1e-9);
    assert_eq!(doc["fit"]["r2"].as_f64(), Some(1.0));
}

#[test]
fn fit_nonlinear_without_init_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("d.csv"), "x,y\n1,2\n2,4\n3,6\n").unwrap();
    let out = drainctl(
        &[
            "fit",
            "--data",
            "d.csv",
            "--template",
            "logistic",
            "--target",
            "y",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--init"));
}

#[test]
fn fit_logistic_with_init_converges() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("l7,p7\n");
    for i in 0..200 {
        let l = 0.9 + 0.55 * i as f64 / 199.0;
        let p = 0.455 / (0.883 + (-65.998 * l + 77.339).exp()) + 0.132;
        csv.push_str(&format!("{l},{p}\n"));
    }
    std::fs::write(dir.path().join("pump.csv"), csv).unwrap();
    let out = drainctl(
        &[
            "fit",
            "--data",
            "pump.csv",
            "--template",
            "logistic",
            "--target",
            "p7",
            "--init",
            "[0.5,0.97,-72.6,85.1,0.145]",
            "--out",
            "fit.json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap())
            .unwrap();
    assert_eq!(doc["fit"]["converged"].as_bool(), Some(true));
    assert!(doc["fit"]["rmse"].as_f64().unwrap() < 1e-6);
}

#[test]
fn fit_holdout_reports_test_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("x,y\n");
    for i in 0..100 {
        let x = i as f64 / 10.0;
        csv.push_str(&format!("{x},{}\n", 2.0 * x + 1.0));
    }
    std::fs::write(dir.path().join("d.csv"), csv).unwrap();
    let out = drainctl(
        &[
            "fit",
            "--data",
            "d.csv",
            "--template",
            "linear",
            "--target",
            "y",
            "--holdout",
            "0.2",
            "--out",
            "fit.json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap())
            .unwrap();
    let holdout_rmse = doc["holdout"]["rmse"].as_f64().unwrap();
    assert!(holdout_rmse < 1e-9, "holdout rmse {holdout_rmse}");
}

#[test]
fn compare_writes_labeled_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("time_s,q_in4,q_in5,q_in6,q_md_mi\n");
    for i in 0..16 {
        csv.push_str(&format!("{},0.2,0.4,0.8,1.0\n", i * 300));
    }
    std::fs::write(dir.path().join("calm.csv"), csv).unwrap();
    let out = drainctl(
        &["compare", "--scenario", "calm.csv", "--out", "cmp"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("cmp/comparison.md")).unwrap();
    for label in ["Q_CSO4", "Q_CSO5", "Q_CSOSur", "Q_WWTPSur"] {
        assert!(report.contains(label), "missing {label} in:\n{report}");
    }
}

#[test]
fn convert_hand_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = drainctl(
        &[
            "convert",
            "--family",
            "fill",
            "--opening",
            "50",
            "--inputs",
            "q_in5=1.0",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let flow: f64 = stdout(&out).trim().parse().unwrap();
    assert!((flow - 1.037).abs() < 1e-9);

    let out = drainctl(
        &[
            "convert",
            "--family",
            "empty",
            "--opening",
            "0",
            "--inputs",
            "d_abro=5,q_in4=2",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let flow: f64 = stdout(&out).trim().parse().unwrap();
    assert_eq!(flow, 0.0);
}

#[test]
fn convert_select_zero_target_closes() {
    let dir = tempfile::tempdir().unwrap();
    let out = drainctl(
        &[
            "convert",
            "--family",
            "fill",
            "--select",
            "--target",
            "0",
            "--inputs",
            "q_in5=1.0",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["opening_pct"].as_f64(), Some(0.0));
}

#[test]
fn convert_off_grid_needs_interpolate() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "convert",
        "--family",
        "fill",
        "--opening",
        "45",
        "--inputs",
        "q_in5=2.0",
    ];
    let out = drainctl(&args, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--interpolate"));

    let mut with_flag = args.to_vec();
    with_flag.push("--interpolate");
    let out = drainctl(&with_flag, dir.path());
    assert!(out.status.success());
    let flow: f64 = stdout(&out).trim().parse().unwrap();
    let expected = drainctl_core::actuation::FillTable::default()
        .flow_at_opening(
            45.0,
            2.0,
            &drainctl_core::actuation::SetpointGrid::default(),
        )
        .unwrap();
    assert!((flow - expected).abs() < 1e-12, "flow {flow} vs {expected}");
}

#[test]
fn convert_rejects_unknown_input_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = drainctl(
        &[
            "convert",
            "--family",
            "fill",
            "--opening",
            "50",
            "--inputs",
            "bogus=1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn simulate_dry_scenario_writes_zero_kpis() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("time_s,q_in4,q_in5,q_in6,q_md_mi\n");
    for i in 0..20 {
        csv.push_str(&format!("{},0,0,0,0\n", i * 300));
    }
    std::fs::write(dir.path().join("dry.csv"), csv).unwrap();
    let out = drainctl(
        &[
            "simulate",
            "--scenario",
            "dry.csv",
            "--controller",
            "rbc",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let kpi: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/kpi.json")).unwrap())
            .unwrap();
    assert_eq!(kpi["total_cso_1e3_m3"].as_f64(), Some(0.0));
    assert!(dir.path().join("run/trajectories.csv").exists());
}

#[test]
fn bad_config_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), "{\n  \"nope\": 1\n}").unwrap();
    std::fs::write(
        dir.path().join("s.csv"),
        "time_s,q_in4,q_in5,q_in6,q_md_mi\n0,0,0,0,0\n300,0,0,0,0\n",
    )
    .unwrap();
    let out = drainctl(
        &[
            "simulate",
            "--scenario",
            "s.csv",
            "--controller",
            "rbc",
            "--config",
            "cfg.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("line 2"), "stderr: {err}");
    assert!(err.contains("nope"), "stderr: {err}");
}

#[test]
fn mpc_simulate_writes_conversion_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("time_s,q_in4,q_in5,q_in6,q_md_mi\n");
    for i in 0..16 {
        csv.push_str(&format!("{},0.3,1.5,3.0,1.5\n", i * 300));
    }
    std::fs::write(dir.path().join("calm.csv"), csv).unwrap();
    let out = drainctl(
        &[
            "simulate", "--scenario", "calm.csv", "--controller", "mpc", "--out", "run",
            "--trace",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    for file in ["trajectories.csv", "kpi.json", "conversion.csv", "trace.csv"] {
        assert!(dir.path().join("run").join(file).exists(), "missing {file}");
    }
    let conv = std::fs::read_to_string(dir.path().join("run/conversion.csv")).unwrap();
    assert_eq!(conv.lines().count(), 17, "one row per step plus header");
}

#[test]
fn fixture_roundtrips_through_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let out = drainctl(&["fixture", "--out", "fx"], dir.path());
    assert!(out.status.success());
    assert!(dir.path().join("fx/storm-fixture.csv").exists());
    assert!(dir.path().join("fx/storm-fixture.json").exists());

    let out = drainctl(
        &[
            "simulate",
            "--scenario",
            "fx/storm-fixture.csv",
            "--controller",
            "fixed",
            "--fixed-fill",
            "100",
            "--fixed-empty",
            "0",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("total CSO"));
}
