//! `edgeprof`: profile training workloads, fit cost models, and simulate
//! prediction-driven scheduling on heterogeneous edge nodes.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use edgeprof::federated::{self, FedConfig, PartitionMode, ValidationMode};
use edgeprof::offloadsim::{
    self, ClusterConfig, EdgeNode, LinkModel, Policy, PolicyKind, ReferenceTimes, SimConfig, SimResult, TaskRequest,
    WorkloadGenConfig,
};
use edgeprof::profiler::{self, HardwareOverrides, ProfileSample};
use edgeprof::regress::{
    self, fit_mlp_regressor, train_test_split, usable_samples, BenchmarkConfig, BenchmarkReport, Design, GbdtParams,
    MlpTrainConfig, ModelFile, ModelSpec, Target,
};
use manifest::{write_atomic, RunManifest};

/// Marks an error as bad input rather than a runtime failure.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Invalid(msg.into()).into())
}

#[derive(Parser, Debug)]
#[command(name = "edgeprof", version, about = "Training-workload profiler, cost-model fitting and edge scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Describe this machine (architecture, clock, cores, calibrated speed factor)
    Probe(ProbeArgs),
    /// Run a sweep plan and append rows to the profiling dataset
    Sweep(SweepArgs),
    /// Fit one cost model on a profiling dataset
    Fit(FitArgs),
    /// Compare MLP regressors against boosted ensembles on every target
    Benchmark(BenchmarkArgs),
    /// Train the MLP regressor with federated averaging
    Fedfit(FedfitArgs),
    /// Simulate task scheduling on heterogeneous edge nodes
    Simulate(SimulateArgs),
    /// Render plot-ready CSV tables from a benchmark or simulation result
    Report(ReportArgs),
}

#[derive(Args, Debug, Serialize)]
struct ProbeArgs {
    /// Override the detected clock (GHz)
    #[arg(long)]
    clock_ghz: Option<f64>,
    /// Override the calibrated speed factor
    #[arg(long)]
    speed_factor: Option<f64>,
    /// Directory for hardware.json and its manifest; prints only when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    /// Sweep plan JSON
    #[arg(long)]
    plan: PathBuf,
    /// Output directory [default: $PROFILER_OUT, else ./profile_out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the plan seed
    #[arg(long)]
    seed: Option<u64>,
    /// Print one line per completed run
    #[arg(long)]
    verbose: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum ModelKind {
    Gbdt,
    Mlp,
}

fn parse_target(s: &str) -> Result<Target, String> {
    s.parse()
}

fn parse_width(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(w) if w > 0 => Ok(w),
        _ => Err(format!("bad layer width {s:?}")),
    }
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    /// Profiling dataset CSV
    #[arg(long)]
    data: PathBuf,
    /// flops, macs or log_time
    #[arg(long, value_parser = parse_target, default_value = "log_time")]
    target: Target,
    #[arg(long, value_enum, default_value_t = ModelKind::Gbdt)]
    model: ModelKind,
    #[arg(long, default_value_t = 12)]
    max_depth: usize,
    #[arg(long, default_value_t = 0.8)]
    subsample: f64,
    #[arg(long, default_value_t = 300)]
    rounds: usize,
    #[arg(long, default_value_t = 0.1)]
    shrinkage: f64,
    /// MLP hidden widths, comma separated
    #[arg(long, value_parser = parse_width, value_delimiter = ',', default_value = "100,50")]
    hidden: Vec<usize>,
    /// MLP training epochs
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep diverged profiling runs
    #[arg(long)]
    include_diverged: bool,
    /// Model file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BenchmarkArgs {
    #[arg(long)]
    data: PathBuf,
    /// Split and subsampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "benchmark_out")]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    mlp_epochs: usize,
    #[arg(long, default_value_t = 300)]
    rounds: usize,
    #[arg(long)]
    include_diverged: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum PartitionArg {
    Iid,
    ByConfigFamily,
}

#[derive(Args, Debug, Serialize)]
struct FedfitArgs {
    #[arg(long)]
    data: PathBuf,
    /// FedConfig JSON; replaces the individual federation flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_target, default_value = "log_time")]
    target: Target,
    #[arg(long, default_value_t = 4)]
    clients: usize,
    #[arg(long, default_value_t = 20)]
    rounds: usize,
    #[arg(long, default_value_t = 5)]
    local_epochs: usize,
    #[arg(long, value_enum, default_value_t = PartitionArg::Iid)]
    partition: PartitionArg,
    #[arg(long, value_parser = parse_width, value_delimiter = ',', default_value = "100,50")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "fedfit_out")]
    out: PathBuf,
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse()
}

fn parse_speed(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("bad speed factor {s:?}")),
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// Profiling dataset supplying reference runtimes and task workloads
    #[arg(long)]
    data: PathBuf,
    /// Task list JSON; a Poisson workload is generated when absent
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Cluster JSON (nodes and link); overrides --speeds and the link flags
    #[arg(long)]
    cluster: Option<PathBuf>,
    /// Log-time model file for greedy_predicted
    #[arg(long)]
    model: Option<PathBuf>,
    /// Policies to run, comma separated
    #[arg(long, value_parser = parse_policy, value_delimiter = ',', default_value = "fcfs,round_robin,greedy_oracle")]
    policy: Vec<PolicyKind>,
    #[arg(long, value_parser = parse_speed, value_delimiter = ',', default_value = "0.5,1,2,4")]
    speeds: Vec<f64>,
    #[arg(long, default_value_t = 1000.0)]
    bandwidth_mbps: f64,
    #[arg(long, default_value_t = 0.005)]
    latency_s: f64,
    #[arg(long, default_value_t = 50)]
    num_tasks: usize,
    /// Arrivals per second for generated workloads
    #[arg(long, default_value_t = 0.5)]
    rate: f64,
    #[arg(long, default_value_t = 1.0)]
    payload_mb: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "simulate_out")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    /// benchmark summary.json or simulate results.json
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "report_out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Probe(a) => probe(a),
        Command::Sweep(a) => sweep(a),
        Command::Fit(a) => fit(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Fedfit(a) => fedfit(a),
        Command::Simulate(a) => simulate(a),
        Command::Report(a) => report(a),
    }
}

fn load_samples(path: &Path) -> Result<Vec<ProfileSample>> {
    profiler::read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    match serde_json::from_str(&text) {
        Ok(v) => Ok(v),
        Err(e) => invalid(format!("{what} {}: {e}", path.display())),
    }
}

fn write_out(dir: &Path, name: &str, text: &str, m: &mut RunManifest) -> Result<()> {
    let p = dir.join(name);
    write_atomic(&p, text.as_bytes())?;
    m.output(&p);
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<()> {
    let mut m = RunManifest::start("probe", &a);
    let hw = profiler::probe_hardware(&HardwareOverrides {
        clock_ghz: a.clock_ghz,
        speed_factor: a.speed_factor,
        ..Default::default()
    });
    let json = serde_json::to_string_pretty(&hw)?;
    println!("{json}");
    if let Some(dir) = &a.out {
        write_out(dir, "hardware.json", &json, &mut m)?;
        m.finish_in(dir)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut plan = match profiler::read_plan(&a.plan) {
        Ok(p) => p,
        Err(profiler::ProfileError::Io { path, source }) => {
            return Err(anyhow::Error::new(source).context(format!("reading plan {}", path.display())))
        }
        Err(e) => return invalid(e.to_string()),
    };
    if let Some(s) = a.seed {
        plan.seed = s;
    }
    if let Err(e) = plan.validate() {
        return invalid(e.to_string());
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| profiler::output_dir(Path::new("profile_out")));
    let mut m = RunManifest::start("sweep", &plan);
    m.input(&a.plan).seed("plan", plan.seed).seed("data", plan.data.seed);
    let verbose = a.verbose;
    let summary = profiler::run_sweep(&plan, &out, |p| {
        if verbose {
            eprintln!(
                "[{}/{}] {} {:.3}s{}",
                p.done,
                p.planned,
                p.sample.config.key(),
                p.sample.total_time_s,
                if p.sample.diverged { " diverged" } else { "" }
            );
        }
    })?;
    for f in &summary.failures {
        eprintln!("failed: {f}");
    }
    println!(
        "{} rows written, {} already present, {} diverged, {} failed, {:.1}s -> {}",
        summary.written,
        summary.skipped_existing,
        summary.diverged,
        summary.failures.len(),
        summary.elapsed_s,
        summary.dataset_path.display()
    );
    m.output(&summary.dataset_path);
    write_out(&out, "sweep_summary.json", &serde_json::to_string_pretty(&summary)?, &mut m)?;
    m.finish_in(&out)?;
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let samples = usable_samples(&load_samples(&a.data)?, a.include_diverged);
    if samples.len() < 2 {
        bail!("{} has {} usable rows; need at least 2", a.data.display(), samples.len());
    }
    let spec = match a.model {
        ModelKind::Gbdt => ModelSpec::Gbdt(GbdtParams {
            max_depth: a.max_depth,
            subsample: a.subsample,
            rounds: a.rounds,
            shrinkage: a.shrinkage,
            seed: a.seed,
        }),
        ModelKind::Mlp => ModelSpec::Mlp(MlpTrainConfig {
            hidden: a.hidden.clone(),
            epochs: a.epochs,
            learning_rate: a.learning_rate,
            seed: a.seed,
            ..Default::default()
        }),
    };
    let mut m = RunManifest::start("fit", &a);
    m.input(&a.data).seed("model", a.seed);
    let model = match regress::fit_model(&samples, a.target, &spec) {
        Ok(model) => model,
        Err(regress::RegressError::Param(p)) => return invalid(p),
        Err(e) => return Err(e.into()),
    };
    write_atomic(&a.out, model.to_json().as_bytes())?;
    m.output(&a.out);
    m.finish_beside(&a.out)?;
    println!("{} model for {} on {} rows -> {}", model_kind_name(&model), a.target, samples.len(), a.out.display());
    Ok(())
}

fn model_kind_name(m: &ModelFile) -> &'static str {
    match m.predictor {
        regress::Predictor::Gbdt(_) => "gbdt",
        regress::Predictor::Mlp(_) => "mlp",
    }
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let samples = load_samples(&a.data)?;
    let cfg = BenchmarkConfig {
        split_seed: a.seed,
        include_diverged: a.include_diverged,
        mlp: MlpTrainConfig {
            epochs: a.mlp_epochs,
            seed: a.seed,
            ..Default::default()
        },
        rounds: a.rounds,
        ..Default::default()
    };
    let mut m = RunManifest::start("benchmark", &cfg);
    m.input(&a.data).seed("split", a.seed);
    let rep = regress::benchmark(&samples, &cfg)?;
    write_out(&a.out, "benchmark.csv", &rep.to_csv(), &mut m)?;
    write_out(&a.out, "convergence.csv", &rep.convergence_csv(), &mut m)?;
    write_out(&a.out, "summary_table.csv", &rep.summary_table(), &mut m)?;
    write_out(&a.out, "summary.json", &serde_json::to_string_pretty(&rep)?, &mut m)?;
    m.finish_in(&a.out)?;
    print!("{}", rep.summary_table());
    Ok(())
}

#[derive(Serialize)]
struct FedReport {
    target: Target,
    train_rows: usize,
    server_holdout_rows: usize,
    federated: federated::Validation,
    centralized: federated::Validation,
    central_baseline_nrmse: f64,
    rounds: Vec<federated::RoundLog>,
}

fn fedfit(a: FedfitArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => read_json::<FedConfig>(p, "federated config")?,
        None => FedConfig {
            num_clients: a.clients,
            rounds: a.rounds,
            local_epochs: a.local_epochs,
            partition: match a.partition {
                PartitionArg::Iid => PartitionMode::Iid,
                PartitionArg::ByConfigFamily => PartitionMode::ByConfigFamily,
            },
            aggregation: federated::Aggregation::FedAvg,
            seed: a.seed,
            holdout_fraction: 0.2,
            mlp: MlpTrainConfig {
                hidden: a.hidden.clone(),
                seed: a.seed,
                ..Default::default()
            },
        },
    };
    if let Err(e) = cfg.validate() {
        return invalid(e.to_string());
    }
    let samples = usable_samples(&load_samples(&a.data)?, false);
    let (tr, te) = train_test_split(samples.len(), 0.8, cfg.seed);
    let train: Vec<ProfileSample> = tr.iter().map(|&i| samples[i].clone()).collect();
    let holdout: Vec<ProfileSample> = te.iter().map(|&i| samples[i].clone()).collect();

    let mut m = RunManifest::start("fedfit", &cfg);
    m.input(&a.data).seed("federation", cfg.seed);
    let parts = federated::partition(&train, cfg.partition, cfg.num_clients, cfg.holdout_fraction, cfg.seed)?;
    let outcome = federated::fed_train(&parts, a.target, &cfg)?;
    let fed_v = federated::validate(&outcome.model, &parts, ValidationMode::Federated, &holdout)?;
    let cen_v = federated::validate(&outcome.model, &parts, ValidationMode::Centralized, &holdout)?;

    let union: Vec<ProfileSample> = parts.iter().flat_map(|p| p.rows.iter().cloned()).collect();
    let design = Design::fit(&union, a.target)?;
    let central = fit_mlp_regressor(
        &design.x,
        &design.y,
        None,
        &MlpTrainConfig {
            epochs: cfg.rounds * cfg.local_epochs,
            seed: cfg.seed,
            ..cfg.mlp.clone()
        },
    )?;
    let central_model = ModelFile::new(
        a.target,
        "centralized",
        design.stats.clone(),
        union[0].hardware.clone(),
        regress::Predictor::Mlp(central),
    );
    let baseline = federated::validate(&central_model, &parts, ValidationMode::Centralized, &holdout)?.nrmse;

    let rep = FedReport {
        target: a.target,
        train_rows: union.len(),
        server_holdout_rows: holdout.len(),
        federated: fed_v,
        centralized: cen_v,
        central_baseline_nrmse: baseline,
        rounds: outcome.rounds,
    };
    write_out(&a.out, "model.json", &outcome.model.to_json(), &mut m)?;
    write_out(&a.out, "validation.json", &serde_json::to_string_pretty(&rep)?, &mut m)?;
    m.finish_in(&a.out)?;
    println!(
        "federated holdout nRMSE {:.4}, server holdout nRMSE {:.4}, central baseline {:.4}",
        rep.federated.nrmse, rep.centralized.nrmse, rep.central_baseline_nrmse
    );
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let samples = load_samples(&a.data)?;
    let times = ReferenceTimes::from_samples(&samples);
    let cluster = match &a.cluster {
        Some(p) => read_json::<ClusterConfig>(p, "cluster config")?,
        None => ClusterConfig {
            nodes: a.speeds.iter().enumerate().map(|(i, &s)| EdgeNode::with_speed(i, s)).collect(),
            link: LinkModel {
                bandwidth_mbps: a.bandwidth_mbps,
                latency_s: a.latency_s,
            },
        },
    };
    let tasks: Vec<TaskRequest> = match &a.tasks {
        Some(p) => read_json(p, "task list")?,
        None => {
            let mut seen = std::collections::BTreeSet::new();
            let choices: Vec<_> = samples
                .iter()
                .filter(|s| !s.diverged && seen.insert((s.config.key(), s.data.num_samples)))
                .map(|s| (s.config.clone(), s.data.clone()))
                .collect();
            let gen = WorkloadGenConfig {
                num_tasks: a.num_tasks,
                rate_per_s: a.rate,
                payload_mb_min: a.payload_mb,
                payload_mb_max: a.payload_mb,
                deadline_slack_s: None,
                seed: a.seed,
            };
            match offloadsim::generate_workload(&gen, &choices) {
                Ok(t) => t,
                Err(e) => return invalid(e.to_string()),
            }
        }
    };
    let model = match &a.model {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading model {}", p.display()))?;
            Some(ModelFile::from_json(&text).map_err(|e| Invalid(format!("model {}: {e}", p.display())))?)
        }
        None => None,
    };
    if a.policy.contains(&PolicyKind::GreedyPredicted) && model.is_none() {
        return invalid("greedy_predicted needs --model");
    }

    let sim_cfg = SimConfig {
        noise_sigma: a.noise_sigma,
        seed: a.seed,
    };
    let mut m = RunManifest::start("simulate", &a);
    m.input(&a.data).seed("simulation", a.seed);
    let mut results: Vec<SimResult> = Vec::new();
    for &kind in &a.policy {
        let policy = match (&model, kind) {
            (Some(mf), PolicyKind::GreedyPredicted) => Policy::predicted(mf),
            _ => Policy::new(kind),
        };
        let r = match offloadsim::simulate(&tasks, &cluster.nodes, &cluster.link, policy, &times, &sim_cfg) {
            Ok(r) => r,
            Err(e @ (offloadsim::SimError::Invalid(_) | offloadsim::SimError::UnknownTask { .. })) => {
                return invalid(e.to_string())
            }
            Err(e) => return Err(e.into()),
        };
        write_out(&a.out, &format!("records_{kind}.csv"), &r.records_csv(), &mut m)?;
        results.push(r);
    }
    let rep = offloadsim::report(&results);
    write_out(&a.out, "tasks.json", &serde_json::to_string_pretty(&tasks)?, &mut m)?;
    write_out(&a.out, "results.json", &serde_json::to_string_pretty(&results)?, &mut m)?;
    write_out(&a.out, "report.csv", &rep.to_csv(), &mut m)?;
    write_out(&a.out, "ratios.csv", &rep.ratios_csv(), &mut m)?;
    m.finish_in(&a.out)?;
    print!("{}", rep.to_csv());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let mut m = RunManifest::start("report", &a);
    m.input(&a.data);
    if let Ok(bench) = serde_json::from_str::<BenchmarkReport>(&text) {
        write_out(&a.out, "capacity_vs_nrmse.csv", &bench.capacity_csv(), &mut m)?;
        write_out(&a.out, "depth_subsample_vs_nrmse.csv", &bench.depth_subsample_csv(), &mut m)?;
        write_out(&a.out, "convergence.csv", &bench.convergence_csv(), &mut m)?;
        write_out(&a.out, "summary_table.csv", &bench.summary_table(), &mut m)?;
        print!("{}", bench.summary_table());
    } else if let Ok(results) = serde_json::from_str::<Vec<SimResult>>(&text) {
        if results.is_empty() {
            return invalid("simulation result list is empty");
        }
        let rep = offloadsim::report(&results);
        write_out(&a.out, "policy_table.csv", &rep.to_csv(), &mut m)?;
        write_out(&a.out, "policy_ratios.csv", &rep.ratios_csv(), &mut m)?;
        print!("{}", rep.to_csv());
    } else {
        return invalid(format!(
            "{} is neither a benchmark summary nor a simulation result",
            a.data.display()
        ));
    }
    m.finish_in(&a.out)?;
    Ok(())
}
