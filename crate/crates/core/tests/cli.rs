use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use benign_attn::experiment::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_benign-attn"))
}

fn smoke() -> ExperimentConfig {
    let mut c = ExperimentConfig::base(120, 8.0, 60);
    c.test_size = 64;
    c.etf_samples = 4000;
    c
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, cfg.to_json_string()).unwrap();
    p
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_trace_summary_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "c.json", &smoke());
    let out = dir.path().join("out");
    let o = run(bin().args(["run", "--seed", "3", "--config"]).arg(&cfg_path).arg("--out-dir").arg(&out));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    let header = trace.lines().next().unwrap();
    assert!(header.starts_with("step,train_loss,train_acc,train_acc_true,test_acc,lambda_plus,lambda_minus,sample"));
    // 0, 10, ..., 60
    assert_eq!(trace.lines().count(), 1 + 7);

    let echo = std::fs::read_to_string(out.join("config.json")).unwrap();
    assert_eq!(ExperimentConfig::from_json_str(&echo).unwrap(), smoke());

    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 3);
    assert_eq!(summary["steps_completed"], 60);
    assert!(summary["final_test_acc"].as_f64().unwrap() > 0.5);
}

#[test]
fn zero_steps_gives_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "c.json", &smoke());
    let out = dir.path().join("out");
    let o = run(bin().args(["run", "--steps", "0", "--config"]).arg(&cfg_path).arg("--out-dir").arg(&out));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("0,"));
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "c.json", &smoke());
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}"));
        let o = run(bin().args(["run", "--seed", "11", "--config"]).arg(&cfg_path).arg("--out-dir").arg(&out));
        assert_eq!(o.status.code(), Some(0));
        outputs.push((std::fs::read(out.join("trace.csv")).unwrap(), std::fs::read(out.join("summary.json")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn json_trace_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "c.json", &smoke());
    let out = dir.path().join("out");
    let o = run(bin().args(["run", "--format", "json", "--log-every", "30", "--config"]).arg(&cfg_path).arg("--out-dir").arg(&out));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("trace.json")).unwrap()).unwrap();
    assert_eq!(v["columns"][0], "step");
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn divergence_exits_3_and_keeps_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke();
    cfg.alpha = 1e200;
    let cfg_path = write_config(dir.path(), "c.json", &cfg);
    let out = dir.path().join("out");
    let o = run(bin().args(["run", "--config"]).arg(&cfg_path).arg("--out-dir").arg(&out));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.lines().count() >= 2);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["diverged_at"].as_u64().is_some());
}

#[test]
fn config_errors_exit_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(smoke()).unwrap();
    v["rho"] = serde_json::json!("high");
    let p = dir.path().join("bad.json");
    std::fs::write(&p, v.to_string()).unwrap();
    let o = run(bin().args(["run", "--config"]).arg(&p).arg("--out-dir").arg(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`rho`"), "{}", stderr(&o));

    let mut v = serde_json::to_value(smoke()).unwrap();
    v["regime_thresholds"]["extra"] = serde_json::json!(1);
    std::fs::write(&p, v.to_string()).unwrap();
    let o = run(bin().args(["classify", "--config"]).arg(&p));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("regime_thresholds"), "{}", stderr(&o));

    let mut v = serde_json::to_value(smoke()).unwrap();
    v["eta"] = serde_json::json!(0.7);
    std::fs::write(&p, v.to_string()).unwrap();
    let o = run(bin().args(["classify", "--config"]).arg(&p));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`eta`"));

    let o = run(bin().args(["classify", "--config"]).arg(dir.path().join("missing.json")));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    let o = run(bin().args(["check", "--preset", "benign", "--suite", ""]));
    assert_eq!(o.status.code(), Some(2));
    let o = run(bin().args(["check", "--preset", "benign", "--suite", "gradients,nope"]));
    assert_eq!(o.status.code(), Some(2));
    let o = run(bin().args(["run", "--preset", "unknown"]));
    assert_eq!(o.status.code(), Some(2));
    let o = run(bin().args(["classify"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn classify_presets() {
    for (preset, want) in [("harmful", "harmful"), ("not-overfitting", "not-overfitting")] {
        let o = run(bin().args(["classify", "--preset", preset]));
        assert_eq!(o.status.code(), Some(0));
        assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), want);
    }
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset("benign").unwrap();
    cfg.regime_thresholds.benign = 10.0;
    let p = write_config(dir.path(), "c.json", &cfg);
    let o = run(bin().args(["classify", "--config"]).arg(&p));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "benign");
}

#[test]
fn gradient_suite_passes_quickly() {
    let start = std::time::Instant::now();
    let o = run(bin().args(["check", "--preset", "benign", "--suite", "gradients"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(start.elapsed().as_secs_f64() < 5.0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<&str> = report.as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["gradients.binary", "gradients.multiclass"]);
    for c in report.as_array().unwrap() {
        for key in ["pass", "measured", "threshold", "config_hash", "seed"] {
            assert!(c.get(key).is_some(), "{key}");
        }
    }
}

#[test]
fn etf_suite_three_classes_noiseless() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke();
    cfg.etf_classes = 3;
    cfg.sigma_eps = 0.0;
    cfg.etf_samples = 20_000;
    let p = write_config(dir.path(), "c.json", &cfg);
    let o = run(bin().args(["check", "--suite", "etf", "--config"]).arg(&p).arg("--out-dir").arg(dir.path()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let cos = report[0]["measured"].as_array().unwrap();
    assert_eq!(cos.len(), 3);
    assert!(cos.iter().all(|c| c.as_f64().unwrap() >= 0.999), "{cos:?}");
}

#[test]
fn failing_check_exits_1_with_names() {
    let dir = tempfile::tempdir().unwrap();
    // a large initialization breaks the near-uniform start
    let mut cfg = smoke();
    cfg.sigma_w = Some(3.0);
    cfg.sigma_p = Some(3.0);
    let p = write_config(dir.path(), "c.json", &cfg);
    let o = run(bin().args(["check", "--suite", "init", "--config"]).arg(&p));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("init.small_attention"));
}

#[test]
fn sweep_writes_cells_and_means() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = smoke();
    base.steps = 20;
    let spec = serde_json::json!({"d_values": [60, 90], "mu_values": [4.0], "seeds": [0, 1, 2], "base": base});
    let p = dir.path().join("s.json");
    std::fs::write(&p, spec.to_string()).unwrap();
    let o = run(bin().args(["sweep", "--threads", "2", "--config"]).arg(&p).arg("--out-dir").arg(dir.path()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("heatmap.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "d,mu_norm,seed,train_loss,test_loss,train_acc,test_acc,status");
    assert_eq!(lines.len(), 1 + 6 + 2);
    assert!(lines[7].starts_with("60,4,mean,"));
}
