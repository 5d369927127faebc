use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edgeprof::profiler::{count_rows, write_dataset, HardwareDescriptor, ProfileSample};
use edgeprof::workload::{count_costs, enumerate_table1_grid, DatasetSpec, ModelArch, ModelConfig, Optimizer};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_edgeprof"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Profiling rows with analytic counts and a synthetic, config-dependent
/// time, so regression commands run without training anything.
fn synthetic_dataset(dir: &Path, rows: usize) -> PathBuf {
    let data = DatasetSpec::mnist_like(1000, 1);
    let hw = HardwareDescriptor::reference();
    let samples: Vec<ProfileSample> = enumerate_table1_grid()
        .into_iter()
        .step_by(2304 / rows)
        .take(rows)
        .enumerate()
        .map(|(i, config)| {
            let c = count_costs(&config, &data).unwrap();
            let time = c.training_flops_total as f64 * 1e-10 / (config.batch_size as f64).sqrt() + 0.5;
            ProfileSample {
                params: c.params,
                flops: c.training_flops_total,
                macs: c.forward_macs_per_sample,
                total_time_s: time,
                final_accuracy: 0.9,
                diverged: false,
                repeat_index: 0,
                seed: i as u64,
                config,
                data: data.clone(),
                hardware: hw.clone(),
            }
        })
        .collect();
    let path = dir.join("profile.csv");
    write_dataset(&path, &samples).unwrap();
    path
}

#[test]
fn sweep_of_ten_configs_writes_ten_rows() {
    let dir = tempfile::tempdir().unwrap();
    let configs: Vec<ModelConfig> = (0..10)
        .map(|i| ModelConfig {
            arch: ModelArch::mlp(&[4 + i]),
            epochs: 1,
            optimizer: Optimizer::Sgd,
            learning_rate: 0.01,
            batch_size: 8,
        })
        .collect();
    let plan = serde_json::json!({
        "configs": configs,
        "data": {
            "num_samples": 16,
            "input_height": 4,
            "input_width": 4,
            "input_channels": 1,
            "num_classes": 2,
            "seed": 3
        },
        "warmup_runs": 0,
        "seed": 1
    });
    let plan_path = dir.path().join("plan.json");
    fs::write(&plan_path, plan.to_string()).unwrap();
    let out = dir.path().join("data");
    let o = run(&["sweep", "--plan", s(&plan_path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(count_rows(&out.join("profile.csv")).unwrap(), 10);
    assert!(out.join("sweep.manifest.json").exists());
    assert!(out.join("sweep_summary.json").exists());
}

#[test]
fn sweep_honours_output_env_var() {
    let dir = tempfile::tempdir().unwrap();
    let plan = serde_json::json!({
        "configs": [{
            "arch": {"family": "MLP", "mlp_hidden": [3]},
            "epochs": 1, "optimizer": "SGD", "learning_rate": 0.01, "batch_size": 4
        }],
        "data": {"num_samples": 8, "input_height": 2, "input_width": 2, "input_channels": 1, "num_classes": 2, "seed": 0},
        "warmup_runs": 0
    });
    let plan_path = dir.path().join("plan.json");
    fs::write(&plan_path, plan.to_string()).unwrap();
    let env_out = dir.path().join("from_env");
    let o = bin()
        .args(["sweep", "--plan", s(&plan_path)])
        .env("PROFILER_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(count_rows(&env_out.join("profile.csv")).unwrap(), 1);
}

#[test]
fn benchmark_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(dir.path(), 128);
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&[
            "benchmark", "--data", s(&data), "--seed", "7", "--out", s(&out), "--mlp-epochs", "3", "--rounds", "5",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("benchmark.manifest.json").exists());
        csvs.push((
            fs::read(out.join("benchmark.csv")).unwrap(),
            fs::read(out.join("convergence.csv")).unwrap(),
        ));
    }
    assert_eq!(csvs[0], csvs[1]);
    let input_after = fs::read(&data).unwrap();
    assert_eq!(count_rows(&data).unwrap(), 128, "inputs are not mutated");
    assert!(!input_after.is_empty());
}

#[test]
fn fit_on_missing_data_exits_2_without_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    let o = run(&["fit", "--data", s(&dir.path().join("missing.csv")), "--out", s(&model)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!model.exists());
    let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert!(leftovers.is_empty());
}

#[test]
fn fit_writes_model_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(dir.path(), 64);
    let model = dir.path().join("m.json");
    let o = run(&["fit", "--data", s(&data), "--target", "flops", "--rounds", "20", "--out", s(&model), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = edgeprof::regress::ModelFile::from_json(&fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(m.target, edgeprof::regress::Target::Flops);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "fit");
    assert_eq!(manifest["seeds"]["model"], 3);
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let o = run(&["benchmark", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["probe", "sweep", "fit", "benchmark", "fedfit", "simulate", "report"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn invalid_plan_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    fs::write(&plan, "{ not json").unwrap();
    let o = run(&["sweep", "--plan", s(&plan), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn probe_writes_hardware() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["probe", "--speed-factor", "1.5", "--clock-ghz", "3.0", "--out", s(dir.path())]);
    assert!(o.status.success());
    let hw: HardwareDescriptor =
        serde_json::from_str(&fs::read_to_string(dir.path().join("hardware.json")).unwrap()).unwrap();
    assert_eq!(hw.speed_factor, 1.5);
    assert_eq!(hw.clock_ghz, 3.0);
    assert!(dir.path().join("probe.manifest.json").exists());
}

#[test]
fn fedfit_writes_federated_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(dir.path(), 64);
    let out = dir.path().join("fed");
    let o = run(&[
        "fedfit", "--data", s(&data), "--clients", "2", "--rounds", "2", "--local-epochs", "1", "--hidden", "8",
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = edgeprof::regress::ModelFile::from_json(&fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(m.provenance, "federated");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("validation.json")).unwrap()).unwrap();
    assert!(v["centralized"]["nrmse"].as_f64().unwrap().is_finite());
    assert_eq!(v["federated"]["per_client"].as_array().unwrap().len(), 2);
}

#[test]
fn fedfit_rejects_one_client() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(dir.path(), 64);
    let o = run(&["fedfit", "--data", s(&data), "--clients", "1", "--out", s(&dir.path().join("f"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(dir.path(), 64);
    let model = dir.path().join("time.json");
    let o = run(&["fit", "--data", s(&data), "--rounds", "30", "--out", s(&model)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("sim");
    let o = run(&[
        "simulate", "--data", s(&data), "--model", s(&model), "--policy", "fcfs,greedy_predicted,greedy_oracle",
        "--num-tasks", "20", "--seed", "4", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 3);
    assert!(out.join("records_greedy_predicted.csv").exists());

    let rendered = dir.path().join("rendered");
    let o = run(&["report", "--data", s(&out.join("results.json")), "--out", s(&rendered)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rendered.join("policy_table.csv").exists());
    assert!(rendered.join("report.manifest.json").exists());
}

#[test]
fn simulate_greedy_predicted_needs_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(dir.path(), 64);
    let o = run(&["simulate", "--data", s(&data), "--policy", "greedy_predicted", "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn report_renders_benchmark_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(dir.path(), 128);
    let out = dir.path().join("bench");
    let o = run(&["benchmark", "--data", s(&data), "--out", s(&out), "--mlp-epochs", "2", "--rounds", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rendered = dir.path().join("r");
    let o = run(&["report", "--data", s(&out.join("summary.json")), "--out", s(&rendered)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["capacity_vs_nrmse.csv", "depth_subsample_vs_nrmse.csv"] {
        assert!(fs::read_to_string(rendered.join(f)).unwrap().lines().count() > 1, "{f}");
    }
}
