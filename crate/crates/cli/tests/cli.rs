//! Command-level behavior: artifact round trips, sweep outputs, the
//! composite-metric passthrough, and error reporting.

use std::path::Path;
use std::process::{Command, Output};

use scpo_core::data::read_bundle;
use scpo_core::trainer::{CurriculumPlan, OrderMode};

fn scpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scpo"))
        .args(args)
        .output()
        .expect("failed to launch the binary")
}

fn run_ok(args: &[&str]) -> String {
    let output = scpo(args);
    assert!(
        output.status.success(),
        "scpo {args:?} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout).unwrap()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        "seed = 5\n\n[gen]\nn_pairs = 24\npatch_count = 4\n\n[hyperparams]\nlearning_rate = 0.8\nepochs_per_stage = 6\nbatch_size = 8\n",
    )
    .unwrap();
    path
}

#[test]
fn gen_data_output_round_trips_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = dir.path().join("run");
    let stdout = run_ok(&[
        "gen-data",
        "--run-dir",
        run.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert!(stdout.contains("24 pairs"));
    let dataset = run.join("dataset.jsonl");
    let bundle = read_bundle(&dataset).unwrap();
    assert_eq!(bundle.pairs.len(), 24);
    let first = std::fs::read(&dataset).unwrap();
    run_ok(&[
        "gen-data",
        "--run-dir",
        run.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(first, std::fs::read(&dataset).unwrap());
}

#[test]
fn score_reports_exact_stage_sizes_and_uniform_policy_zeroes_z_h() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = dir.path().join("run");
    let run_str = run.to_str().unwrap();
    let config_str = config.to_str().unwrap();
    run_ok(&["gen-data", "--run-dir", run_str, "--config", config_str]);
    let stdout = run_ok(&["score", "--run-dir", run_str, "--config", config_str]);
    assert!(stdout.contains("easy=6 medium=9 hard=9"), "stdout: {stdout}");

    // Uniform base policy: the uncertainty column is constant, so its
    // z-scores are all zero and the composite reduces to z_s + z_d.
    let report = std::fs::read_to_string(run.join("difficulty.csv")).unwrap();
    for line in report.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[4], "0", "z_h should be zero, line: {line}");
        let z_s: f64 = fields[5].parse().unwrap();
        let z_d: f64 = fields[6].parse().unwrap();
        let score: f64 = fields[7].parse().unwrap();
        assert!((score - (z_d + z_s)).abs() <= 1e-12);
    }

    let before = std::fs::read_to_string(run.join("manifest.txt")).unwrap();
    run_ok(&["partition", "--run-dir", run_str, "--config", config_str]);
    assert_eq!(before, std::fs::read_to_string(run.join("manifest.txt")).unwrap());
}

#[test]
fn zero_learning_rate_training_is_an_identity() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        "seed = 5\n\n[gen]\nn_pairs = 24\npatch_count = 4\n\n[hyperparams]\nlearning_rate = 0.0\nepochs_per_stage = 2\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let run_str = run.to_str().unwrap();
    let config_str = config.to_str().unwrap();
    run_ok(&["gen-data", "--run-dir", run_str, "--config", config_str]);
    run_ok(&["score", "--run-dir", run_str, "--config", config_str]);
    run_ok(&["train", "--run-dir", run_str, "--config", config_str]);
    let initial = std::fs::read(run.join("policy_initial.json")).unwrap();
    let final_ = std::fs::read(run.join("policy_final.json")).unwrap();
    assert_eq!(initial, final_);
}

#[test]
fn order_flag_is_written_back_and_labels_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = dir.path().join("run");
    let run_str = run.to_str().unwrap();
    let config_str = config.to_str().unwrap();
    run_ok(&["gen-data", "--run-dir", run_str, "--config", config_str]);
    run_ok(&["score", "--run-dir", run_str, "--config", config_str]);
    run_ok(&["train", "--run-dir", run_str, "--config", config_str, "--order", "reversed"]);
    let plan = CurriculumPlan::read_from(&run.join("plan.json")).unwrap();
    assert_eq!(plan.order_mode, OrderMode::Reversed);
    run_ok(&["eval", "--run-dir", run_str, "--config", config_str]);
    run_ok(&["report", "--run-dir", run_str, "--config", config_str]);
    let trajectory = std::fs::read_to_string(run.join("trajectory.csv")).unwrap();
    assert!(trajectory.lines().nth(1).unwrap().starts_with("reversed,0,initial"));
    assert!(trajectory.contains("reversed,1,hard"));
    assert!(trajectory.contains("reversed,3,easy"));
}

#[test]
fn lambda_sweep_writes_one_trace_set_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = dir.path().join("run");
    let run_str = run.to_str().unwrap();
    let config_str = config.to_str().unwrap();
    run_ok(&["gen-data", "--run-dir", run_str, "--config", config_str]);
    run_ok(&["score", "--run-dir", run_str, "--config", config_str]);
    run_ok(&[
        "train",
        "--run-dir",
        run_str,
        "--config",
        config_str,
        "--lambda-sweep",
        "0.1,0.2,0.3",
    ]);
    for lambda in ["0.1", "0.2", "0.3"] {
        let sub = run.join(format!("lambda_{lambda}"));
        assert!(sub.join("trace.csv").exists(), "missing trace for lambda {lambda}");
        assert!(sub.join("policy_final.json").exists());
    }
    // The symmetry column scales with lambda only through the total.
    let read_total = |lambda: &str| {
        let text = std::fs::read_to_string(run.join(format!("lambda_{lambda}/trace.csv"))).unwrap();
        let first = text.lines().nth(1).unwrap();
        first.split(',').nth(10).unwrap().parse::<f64>().unwrap()
    };
    assert!(read_total("0.1") < read_total("0.2"));
    assert!(read_total("0.2") < read_total("0.3"));
}

#[test]
fn medium_sweep_repartitions_from_the_difficulty_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = dir.path().join("run");
    let run_str = run.to_str().unwrap();
    let config_str = config.to_str().unwrap();
    run_ok(&["gen-data", "--run-dir", run_str, "--config", config_str]);
    run_ok(&["score", "--run-dir", run_str, "--config", config_str]);
    run_ok(&[
        "train",
        "--run-dir",
        run_str,
        "--config",
        config_str,
        "--medium-sweep",
        "0.3,0.5",
    ]);
    for (medium, expected_sizes) in [("0.3", vec![6, 7, 11]), ("0.5", vec![6, 12, 6])] {
        let sub = run.join(format!("medium_{medium}"));
        let plan = CurriculumPlan::read_from(&sub.join("plan.json")).unwrap();
        let sizes: Vec<usize> = plan.stages.iter().map(|s| s.pair_ids.len()).collect();
        assert_eq!(sizes, expected_sizes, "medium = {medium}");
        assert!(sub.join("trace.csv").exists());
    }
}

#[test]
fn eval_passes_composite_metrics_through() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = dir.path().join("run");
    let run_str = run.to_str().unwrap();
    let config_str = config.to_str().unwrap();
    run_ok(&["gen-data", "--run-dir", run_str, "--config", config_str]);
    run_ok(&["score", "--run-dir", run_str, "--config", config_str]);
    run_ok(&["train", "--run-dir", run_str, "--config", config_str]);
    let metrics = dir.path().join("metrics.csv");
    std::fs::write(&metrics, "chair,cover\n4.5,60.2\n").unwrap();
    run_ok(&[
        "eval",
        "--run-dir",
        run_str,
        "--config",
        config_str,
        "--metrics",
        metrics.to_str().unwrap(),
    ]);
    let report = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    let overall = report.lines().last().unwrap();
    let f1: f64 = overall.split(',').nth(4).unwrap().parse().unwrap();
    assert!((f1 - 73.8).abs() <= 0.05, "composite {f1}");
    // The initial uniform policy row reports exact coin-flip accuracy.
    let initial = report.lines().find(|l| l.starts_with("initial")).unwrap();
    assert_eq!(initial.split(',').nth(1).unwrap(), "0.5");
}

#[test]
fn errors_exit_nonzero_and_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(&config, "[gen]\nn_pairs = 0\n").unwrap();
    let run = dir.path().join("run");
    let output = scpo(&[
        "gen-data",
        "--run-dir",
        run.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("n_pairs"), "stderr: {stderr}");

    // Eval before train: the missing snapshot is named.
    let config = write_config(dir.path());
    let run_str = run.to_str().unwrap();
    let config_str = config.to_str().unwrap();
    run_ok(&["gen-data", "--run-dir", run_str, "--config", config_str]);
    run_ok(&["score", "--run-dir", run_str, "--config", config_str]);
    let output = scpo(&["eval", "--run-dir", run_str, "--config", config_str]);
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("policy_easy.json"), "stderr: {stderr}");

    // Unknown keys in the config file are rejected with the field name.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[hyperparams]\nbeta3 = 0.5\n").unwrap();
    let output = scpo(&["gen-data", "--run-dir", run_str, "--config", bad.to_str().unwrap()]);
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("beta3"));
}
