use std::path::Path;
use std::process::{Command, Output};

use fedvit::data::heterogeneity_stats;
use fedvit::experiment::{build_federation, ExperimentConfig};

fn fedvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedvit"))
        .args(args)
        .env_remove("FEDVIT_JOBS")
        .output()
        .expect("binary runs")
}

fn small_config(extra: &str) -> String {
    format!(
        r#"{{
  "model": {{"image_h": 8, "image_w": 8, "dim": 8, "heads": 2, "blocks": 1, "mlp_hidden": 16}},
  "data": {{"synthetic": {{"samples_per_class": 20, "image_h": 8, "image_w": 8}}}},
  "partition": {{"num_clients": 3, "alpha": 0.5}},
  "strategy": {{"kind": "FEDAVG", "batch_size": 8}},
  "rounds": 2{extra}
}}"#
    )
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_rounds_write_only_the_initial_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &small_config("").replace(r#""rounds": 2"#, r#""rounds": 0"#));
    let out = dir.path().join("out");
    let o = fedvit(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("rounds.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], fedvit::experiment::ROUNDS_HEADER);
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[1..].iter().all(|l| l.starts_with("0,")));
    assert!(out.join("summary.json").exists());
    assert!(out.join("checkpoint.json").exists());
}

#[test]
fn reruns_are_byte_identical_and_values_finite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &small_config(""));
    let mut outputs = Vec::new();
    for (name, jobs) in [("a", "1"), ("b", "1"), ("c", "4")] {
        let out = dir.path().join(name);
        let o = fedvit(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--jobs", jobs]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(std::fs::read(out.join("rounds.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    let text = String::from_utf8(outputs.remove(0)).unwrap();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 13);
        for i in [4, 5, 6, 8, 10, 11, 12] {
            assert!(fields[i].parse::<f64>().unwrap().is_finite(), "{line}");
        }
    }
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"strategy": {"mu": 0.5}}"#);
    let o = fedvit(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("strategy.kind"), "{}", stderr(&o));

    let cfg = write(dir.path(), "d.json", &small_config("").replace("0.5}", "-1.0}"));
    let o = fedvit(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("partition.alpha"), "{}", stderr(&o));

    let o = fedvit(&["run", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        &small_config("").replace(
            r#""data": {"synthetic": {"samples_per_class": 20, "image_h": 8, "image_w": 8}},"#,
            r#""data": {"idx": {"images": "/nonexistent/a", "labels": "/nonexistent/b"}},"#,
        ),
    );
    let o = fedvit(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn single_cell_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &small_config(""));
    let run_out = dir.path().join("run");
    let sweep_out = dir.path().join("sweep");
    assert!(fedvit(&["run", "--config", &cfg, "--out", run_out.to_str().unwrap()]).status.success());
    let o = fedvit(&["sweep", "--config", &cfg, "--out", sweep_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read(run_out.join("rounds.csv")).unwrap();
    let b = std::fs::read(sweep_out.join("fedavg_a0.5_s0").join("rounds.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_grid_layout_and_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &small_config(""));
    let out = dir.path().join("sweep");
    let o = fedvit(&[
        "sweep", "--config", &cfg, "--out", out.to_str().unwrap(),
        "--strategies", "fedavg,fedmha", "--alphas", "0.1,10",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dirs: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(dirs.len(), 4);
    let summary = std::fs::read_to_string(out.join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count() - 1, 4 * (2 + 1));
    assert!(!out.join("sweep_failures.csv").exists());
}

#[test]
fn failed_cells_are_recorded_without_stopping_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    // 60 samples cannot give 30 clients two samples each
    let cfg = write(dir.path(), "c.json", &small_config("").replace(r#""num_clients": 3"#, r#""num_clients": 30"#));
    let out = dir.path().join("sweep");
    let o = fedvit(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--alphas", "0.01,1000"]);
    assert_eq!(o.status.code(), Some(3));
    let failures = std::fs::read_to_string(out.join("sweep_failures.csv")).unwrap();
    assert!(failures.lines().count() >= 2);
    assert!(out.join("sweep_summary.csv").exists());
}

#[test]
fn corrupted_gradient_fails_gradcheck() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &small_config(""));
    let o = fedvit(&["gradcheck", "--config", &cfg, "--corrupt-grad", "head_w"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("head_w"), "{}", stderr(&o));
}

#[test]
fn tiny_model_gradcheck_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &small_config(""));
    let start = std::time::Instant::now();
    let o = fedvit(&["gradcheck", "--config", &cfg]);
    assert!(matches!(o.status.code(), Some(0 | 1)), "{}", stderr(&o));
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
}

#[test]
fn partition_stats_output() {
    let dir = tempfile::tempdir().unwrap();
    let text = small_config("").replace(r#""num_clients": 3"#, r#""num_clients": 1"#);
    let cfg = write(dir.path(), "c.json", &text);
    let out = dir.path().join("stats");
    let o = fedvit(&["partition-stats", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("partition_stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);

    let text = small_config("");
    let cfg = write(dir.path(), "d.json", &text);
    let o = fedvit(&["partition-stats", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("partition_stats.csv")).unwrap();
    let mut sums = [0.0f64; 3];
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        sums[f[0].parse::<usize>().unwrap()] += f[3].parse::<f64>().unwrap();
    }
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12), "{sums:?}");

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("partition_summary.json")).unwrap()).unwrap();
    let config = ExperimentConfig::from_json(&text).unwrap();
    let stats = heterogeneity_stats(&build_federation(&config).unwrap().parts).unwrap();
    assert_eq!(summary["dispersion"].as_f64().unwrap(), stats.dispersion);
}
