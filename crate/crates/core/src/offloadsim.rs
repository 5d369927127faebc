//! Simulated heterogeneous edge nodes running offloaded training tasks.
//!
//! Tasks are dispatched immediately, in arrival order, to unit-capacity nodes
//! that run one task at a time without preemption. A task can start on a node
//! once its payload has crossed the link and the node is free. Actual runtimes
//! are a task's reference-machine time divided by the node's speed factor,
//! times a per-task lognormal noise factor.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiler::{HardwareDescriptor, ProfileSample};
use crate::regress::{encode_parts, ModelFile, RegressError, Target};
use crate::workload::{DatasetSpec, ModelConfig};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no reference time for task {task_id} ({key})")]
    UnknownTask { task_id: usize, key: String },
    #[error("policy {0} needs a runtime predictor")]
    MissingPredictor(PolicyKind),
    #[error("predictor must model the log_time target, found {0}")]
    WrongTarget(Target),
    #[error("simulation needs at least one node")]
    NoNodes,
    #[error("offload decision needs at least one remote node")]
    NoRemotes,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Regress(#[from] RegressError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeNode {
    pub node_id: usize,
    pub hardware: HardwareDescriptor,
    #[serde(default)]
    pub busy_until: f64,
}

impl EdgeNode {
    pub fn with_speed(node_id: usize, speed_factor: f64) -> Self {
        Self {
            node_id,
            hardware: HardwareDescriptor::reference().with_speed(speed_factor),
            busy_until: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub bandwidth_mbps: f64,
    pub latency_s: f64,
}

impl LinkModel {
    pub const IDEAL: LinkModel = LinkModel {
        bandwidth_mbps: f64::INFINITY,
        latency_s: 0.0,
    };

    /// Payloads are given in megabytes; bandwidth in megabits per second.
    pub fn transfer_time(&self, payload_mb: f64) -> f64 {
        self.latency_s + payload_mb * 8.0 / self.bandwidth_mbps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Device,
    Broker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub task_id: usize,
    pub config: ModelConfig,
    pub data: DatasetSpec,
    pub payload_mb: f64,
    pub arrival_s: f64,
    #[serde(default)]
    pub deadline_s: Option<f64>,
    #[serde(default = "default_origin")]
    pub origin: Origin,
}

fn default_origin() -> Origin {
    Origin::Broker
}

impl TaskRequest {
    pub fn lookup_key(&self) -> String {
        reference_key(&self.config, &self.data)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.payload_mb > 0.0) || !self.arrival_s.is_finite() || self.arrival_s < 0.0 {
            return Err(SimError::Invalid(format!("task {}: bad payload or arrival", self.task_id)));
        }
        if let Some(d) = self.deadline_s {
            if d <= self.arrival_s {
                return Err(SimError::Invalid(format!("task {}: deadline before arrival", self.task_id)));
            }
        }
        Ok(())
    }
}

fn reference_key(config: &ModelConfig, data: &DatasetSpec) -> String {
    format!("{}|n{}", config.key(), data.num_samples)
}

/// Reference-machine (speed factor 1.0) training time per workload.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTimes {
    pub seconds: BTreeMap<String, f64>,
}

impl ReferenceTimes {
    /// Median measured time per workload, rescaled to speed factor 1.0.
    /// Diverged runs are skipped.
    pub fn from_samples(samples: &[ProfileSample]) -> Self {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in samples.iter().filter(|s| !s.diverged) {
            groups
                .entry(reference_key(&s.config, &s.data))
                .or_default()
                .push(s.total_time_s * s.hardware.speed_factor);
        }
        let seconds = groups
            .into_iter()
            .map(|(k, mut v)| {
                v.sort_by(f64::total_cmp);
                let m = if v.len() % 2 == 1 {
                    v[v.len() / 2]
                } else {
                    0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
                };
                (k, m)
            })
            .collect();
        Self { seconds }
    }

    pub fn insert(&mut self, config: &ModelConfig, data: &DatasetSpec, seconds: f64) {
        self.seconds.insert(reference_key(config, data), seconds);
    }

    pub fn get(&self, task: &TaskRequest) -> Result<f64, SimError> {
        self.seconds.get(&task.lookup_key()).copied().ok_or_else(|| SimError::UnknownTask {
            task_id: task.task_id,
            key: task.lookup_key(),
        })
    }
}

/// Source of reference-machine runtime estimates.
pub trait RuntimePredictor {
    fn reference_seconds(&self, task: &TaskRequest) -> Result<f64, SimError>;
}

impl RuntimePredictor for ReferenceTimes {
    fn reference_seconds(&self, task: &TaskRequest) -> Result<f64, SimError> {
        self.get(task)
    }
}

impl RuntimePredictor for ModelFile {
    /// Encodes the task on the model's training hardware, de-logs the
    /// prediction and rescales it to speed factor 1.0.
    fn reference_seconds(&self, task: &TaskRequest) -> Result<f64, SimError> {
        self.check_schema()?;
        if self.target != Target::LogTime {
            return Err(SimError::WrongTarget(self.target));
        }
        let f = encode_parts(&task.config, &task.data, &self.reference_hardware)?;
        Ok(10f64.powf(self.predict(&f)) * self.reference_hardware.speed_factor)
    }
}

/// Predicted seconds for `task` on `node`.
pub fn predict_runtime(task: &TaskRequest, node: &EdgeNode, predictor: &dyn RuntimePredictor) -> Result<f64, SimError> {
    Ok(predictor.reference_seconds(task)? / node.hardware.speed_factor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Local,
    Remote(usize),
}

/// Chooses where to run `task` at time `now`: locally (queue wait plus
/// runtime) or on a remote (transfer plus queue wait plus runtime). Queue
/// wait is `busy_until - now`, floored at zero. Ties go to local, then to the
/// lowest node id.
pub fn decide_offload(
    task: &TaskRequest,
    local: &EdgeNode,
    remotes: &[EdgeNode],
    link: &LinkModel,
    predictor: &dyn RuntimePredictor,
    now: f64,
) -> Result<Decision, SimError> {
    if remotes.is_empty() {
        return Err(SimError::NoRemotes);
    }
    let wait = |n: &EdgeNode| (n.busy_until - now).max(0.0);
    let mut best = (wait(local) + predict_runtime(task, local, predictor)?, Decision::Local, usize::MAX);
    let transfer = link.transfer_time(task.payload_mb);
    for r in remotes {
        let cost = transfer + wait(r) + predict_runtime(task, r, predictor)?;
        let better = cost < best.0 || (cost == best.0 && best.1 != Decision::Local && r.node_id < best.2);
        if better {
            best = (cost, Decision::Remote(r.node_id), r.node_id);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Fcfs,
    RoundRobin,
    GreedyPredicted,
    GreedyOracle,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Fcfs,
        PolicyKind::RoundRobin,
        PolicyKind::GreedyPredicted,
        PolicyKind::GreedyOracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Fcfs => "fcfs",
            PolicyKind::RoundRobin => "round_robin",
            PolicyKind::GreedyPredicted => "greedy_predicted",
            PolicyKind::GreedyOracle => "greedy_oracle",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| format!("unknown policy {s:?}"))
    }
}

/// A scheduling policy and, for `GreedyPredicted`, its runtime predictor.
#[derive(Clone, Copy)]
pub struct Policy<'a> {
    pub kind: PolicyKind,
    pub predictor: Option<&'a dyn RuntimePredictor>,
}

impl<'a> Policy<'a> {
    pub fn new(kind: PolicyKind) -> Self {
        Self { kind, predictor: None }
    }

    pub fn predicted(predictor: &'a dyn RuntimePredictor) -> Self {
        Self {
            kind: PolicyKind::GreedyPredicted,
            predictor: Some(predictor),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Sigma of the multiplicative lognormal runtime noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Noise factor of one task; exactly 1.0 when `sigma` is 0.
pub fn noise_factor(seed: u64, task_id: usize, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (task_id as u64).wrapping_add(1).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    let z: f64 = StandardNormal.sample(&mut rng);
    (sigma * z).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: usize,
    pub node_id: usize,
    pub arrival_s: f64,
    pub transfer_s: f64,
    pub start_s: f64,
    pub finish_s: f64,
    pub predicted_runtime_s: Option<f64>,
    pub actual_runtime_s: f64,
    pub deadline_s: Option<f64>,
    pub deadline_met: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub policy: PolicyKind,
    pub records: Vec<TaskRecord>,
    pub makespan_s: f64,
    pub mean_completion_s: f64,
    pub deadline_violation_count: usize,
}

impl SimResult {
    fn from_records(policy: PolicyKind, records: Vec<TaskRecord>) -> Self {
        let first_arrival = records.iter().map(|r| r.arrival_s).fold(f64::INFINITY, f64::min);
        let last_finish = records.iter().map(|r| r.finish_s).fold(f64::NEG_INFINITY, f64::max);
        let makespan_s = if records.is_empty() { 0.0 } else { last_finish - first_arrival };
        let mean_completion_s = if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.finish_s - r.arrival_s).sum::<f64>() / records.len() as f64
        };
        let deadline_violation_count = records
            .iter()
            .filter(|r| r.deadline_s.is_some_and(|d| r.finish_s > d))
            .count();
        Self {
            policy,
            records,
            makespan_s,
            mean_completion_s,
            deadline_violation_count,
        }
    }

    pub fn records_csv(&self) -> String {
        let mut s = String::from(
            "task_id,node_id,arrival_s,transfer_s,start_s,finish_s,predicted_runtime_s,actual_runtime_s,deadline_s,deadline_met\n",
        );
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.task_id,
                r.node_id,
                r.arrival_s,
                r.transfer_s,
                r.start_s,
                r.finish_s,
                opt(r.predicted_runtime_s),
                r.actual_runtime_s,
                opt(r.deadline_s),
                r.deadline_met.map(|b| b.to_string()).unwrap_or_default()
            );
        }
        s
    }
}

struct NodeState {
    busy_until: f64,
    /// Where the scheduler believes the node's queue ends.
    predicted_until: f64,
}

/// Runs the event-driven dispatch loop for one policy.
///
/// Every task goes, in order of `(arrival_s, task_id)`, to the node chosen by
/// the policy and starts at `max(arrival + transfer, node busy_until)`:
///
/// * `Fcfs` picks the node that can start the task earliest.
/// * `RoundRobin` cycles through nodes in id order.
/// * `GreedyPredicted` picks the node with the earliest predicted finish. A
///   node that is idle at arrival is free now; a busy node is free when its
///   predicted queue ends.
/// * `GreedyOracle` does the same with actual runtimes and busy times.
///
/// Ties go to the lowest node id.
pub fn simulate(
    tasks: &[TaskRequest],
    nodes: &[EdgeNode],
    link: &LinkModel,
    policy: Policy<'_>,
    times: &ReferenceTimes,
    cfg: &SimConfig,
) -> Result<SimResult, SimError> {
    if nodes.is_empty() {
        return Err(SimError::NoNodes);
    }
    if policy.kind == PolicyKind::GreedyPredicted && policy.predictor.is_none() {
        return Err(SimError::MissingPredictor(policy.kind));
    }
    for t in tasks {
        t.validate()?;
    }
    let mut nodes: Vec<&EdgeNode> = nodes.iter().collect();
    nodes.sort_by_key(|n| n.node_id);
    let mut order: Vec<&TaskRequest> = tasks.iter().collect();
    order.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s).then(a.task_id.cmp(&b.task_id)));
    let mut state: Vec<NodeState> = nodes
        .iter()
        .map(|n| NodeState {
            busy_until: n.busy_until,
            predicted_until: n.busy_until,
        })
        .collect();
    let mut records = Vec::with_capacity(order.len());

    for (k, task) in order.into_iter().enumerate() {
        let reference = times.get(task)?;
        let noise = noise_factor(cfg.seed, task.task_id, cfg.noise_sigma);
        let transfer = link.transfer_time(task.payload_mb);
        let ready = task.arrival_s + transfer;
        let actual: Vec<f64> = nodes.iter().map(|n| reference / n.hardware.speed_factor * noise).collect();
        let predicted: Option<Vec<f64>> = match policy.predictor {
            Some(p) => Some(nodes.iter().map(|n| predict_runtime(task, n, p)).collect::<Result<_, _>>()?),
            None => None,
        };
        let argmin = |cost: &dyn Fn(usize) -> f64| -> usize {
            (0..nodes.len()).fold(0, |best, j| if cost(j) < cost(best) { j } else { best })
        };
        let chosen = match policy.kind {
            PolicyKind::Fcfs => argmin(&|j| state[j].busy_until.max(ready)),
            PolicyKind::RoundRobin => k % nodes.len(),
            PolicyKind::GreedyOracle => argmin(&|j| state[j].busy_until.max(ready) + actual[j]),
            PolicyKind::GreedyPredicted => {
                let pred = predicted.as_ref().expect("checked above");
                let free = |j: usize| {
                    if state[j].busy_until <= task.arrival_s {
                        state[j].busy_until
                    } else {
                        state[j].predicted_until
                    }
                };
                argmin(&|j| free(j).max(ready) + pred[j])
            }
        };
        let s = &mut state[chosen];
        let start = s.busy_until.max(ready);
        let finish = start + actual[chosen];
        let believed_free = if s.busy_until <= task.arrival_s {
            s.busy_until
        } else {
            s.predicted_until
        };
        s.predicted_until = match &predicted {
            Some(p) => believed_free.max(ready) + p[chosen],
            None => finish,
        };
        s.busy_until = finish;
        records.push(TaskRecord {
            task_id: task.task_id,
            node_id: nodes[chosen].node_id,
            arrival_s: task.arrival_s,
            transfer_s: transfer,
            start_s: start,
            finish_s: finish,
            predicted_runtime_s: predicted.as_ref().map(|p| p[chosen]),
            actual_runtime_s: actual[chosen],
            deadline_s: task.deadline_s,
            deadline_met: task.deadline_s.map(|d| finish <= d),
        });
    }
    Ok(SimResult::from_records(policy.kind, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub policy: PolicyKind,
    pub tasks: usize,
    pub makespan_s: f64,
    pub mean_completion_s: f64,
    pub deadline_violation_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub rows: Vec<PolicyRow>,
    /// `(a, b, mean_completion(a) / mean_completion(b))` for every ordered pair.
    pub ratios: Vec<(PolicyKind, PolicyKind, f64)>,
}

impl PolicyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("policy,tasks,makespan_s,mean_completion_s,deadline_violations\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.policy, r.tasks, r.makespan_s, r.mean_completion_s, r.deadline_violation_count
            );
        }
        s
    }

    pub fn ratios_csv(&self) -> String {
        let mut s = String::from("policy,baseline,mean_completion_ratio\n");
        for (a, b, r) in &self.ratios {
            let _ = writeln!(s, "{a},{b},{r}");
        }
        s
    }

    pub fn ratio(&self, a: PolicyKind, b: PolicyKind) -> Option<f64> {
        self.ratios.iter().find(|(x, y, _)| *x == a && *y == b).map(|r| r.2)
    }
}

/// Aggregates per policy plus pairwise mean-completion ratios.
pub fn report(results: &[SimResult]) -> PolicyReport {
    let rows: Vec<PolicyRow> = results
        .iter()
        .map(|r| PolicyRow {
            policy: r.policy,
            tasks: r.records.len(),
            makespan_s: r.makespan_s,
            mean_completion_s: r.mean_completion_s,
            deadline_violation_count: r.deadline_violation_count,
        })
        .collect();
    let mut ratios = Vec::new();
    for a in &rows {
        for b in &rows {
            if a.policy != b.policy {
                ratios.push((a.policy, b.policy, a.mean_completion_s / b.mean_completion_s));
            }
        }
    }
    PolicyReport { rows, ratios }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadGenConfig {
    pub num_tasks: usize,
    /// Poisson arrival rate, tasks per second.
    pub rate_per_s: f64,
    pub payload_mb_min: f64,
    pub payload_mb_max: f64,
    /// Deadline = arrival + this slack, when set.
    #[serde(default)]
    pub deadline_slack_s: Option<f64>,
    pub seed: u64,
}

/// Seeded Poisson workload drawing workloads uniformly from `choices`.
pub fn generate_workload(
    cfg: &WorkloadGenConfig,
    choices: &[(ModelConfig, DatasetSpec)],
) -> Result<Vec<TaskRequest>, SimError> {
    if choices.is_empty() && cfg.num_tasks > 0 {
        return Err(SimError::Invalid("no workloads to draw from".into()));
    }
    if !(cfg.rate_per_s > 0.0) || !(cfg.payload_mb_min > 0.0) || cfg.payload_mb_max < cfg.payload_mb_min {
        return Err(SimError::Invalid("rate and payload range must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gaps = Exp::new(cfg.rate_per_s).map_err(|e| SimError::Invalid(e.to_string()))?;
    let mut t = 0.0;
    let mut out = Vec::with_capacity(cfg.num_tasks);
    for task_id in 0..cfg.num_tasks {
        t += gaps.sample(&mut rng);
        let (config, data) = &choices[rng.gen_range(0..choices.len())];
        let payload_mb = if cfg.payload_mb_max > cfg.payload_mb_min {
            rng.gen_range(cfg.payload_mb_min..cfg.payload_mb_max)
        } else {
            cfg.payload_mb_min
        };
        out.push(TaskRequest {
            task_id,
            config: config.clone(),
            data: data.clone(),
            payload_mb,
            arrival_s: t,
            deadline_s: cfg.deadline_slack_s.map(|s| t + s),
            origin: Origin::Broker,
        });
    }
    Ok(out)
}

/// Nodes plus the link joining them to the broker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub nodes: Vec<EdgeNode>,
    pub link: LinkModel,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{ModelArch, Optimizer};

    fn cfg_n(epochs: usize) -> ModelConfig {
        ModelConfig {
            arch: ModelArch::mlp(&[10]),
            epochs,
            optimizer: Optimizer::Sgd,
            learning_rate: 0.01,
            batch_size: 16,
        }
    }

    fn task(id: usize, epochs: usize, arrival: f64) -> TaskRequest {
        TaskRequest {
            task_id: id,
            config: cfg_n(epochs),
            data: DatasetSpec::mnist_like(1000, 0),
            payload_mb: 1.0,
            arrival_s: arrival,
            deadline_s: None,
            origin: Origin::Broker,
        }
    }

    fn table(pairs: &[(usize, f64)]) -> ReferenceTimes {
        let mut t = ReferenceTimes::default();
        for &(e, s) in pairs {
            t.insert(&cfg_n(e), &DatasetSpec::mnist_like(1000, 0), s);
        }
        t
    }

    fn exact() -> SimConfig {
        SimConfig {
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn hand_traced_three_tasks_two_nodes() {
        let tasks: Vec<_> = (0..3).map(|i| task(i, 5, 0.0)).collect();
        let nodes = [EdgeNode::with_speed(0, 1.0), EdgeNode::with_speed(1, 2.0)];
        let times = table(&[(5, 10.0)]);
        let r = simulate(&tasks, &nodes, &LinkModel::IDEAL, Policy::new(PolicyKind::GreedyOracle), &times, &exact()).unwrap();
        let finishes: Vec<f64> = r.records.iter().map(|x| x.finish_s).collect();
        assert_eq!(finishes, vec![5.0, 10.0, 10.0]);
        assert_eq!(r.records.iter().map(|x| x.node_id).collect::<Vec<_>>(), vec![1, 0, 1]);
        assert_eq!(r.makespan_s, 10.0);
    }

    #[test]
    fn single_node_policies_agree() {
        let tasks = vec![task(0, 5, 0.0), task(1, 10, 1.0), task(2, 5, 30.0)];
        let nodes = [EdgeNode::with_speed(0, 1.0)];
        let times = table(&[(5, 4.0), (10, 8.0)]);
        let mut spans = Vec::new();
        for kind in PolicyKind::ALL {
            let p = Policy {
                kind,
                predictor: Some(&times),
            };
            spans.push(simulate(&tasks, &nodes, &LinkModel::IDEAL, p, &times, &exact()).unwrap().makespan_s);
        }
        assert!(spans.iter().all(|&s| s == 34.0), "{spans:?}");
    }

    #[test]
    fn empty_workload() {
        let r = simulate(&[], &[EdgeNode::with_speed(0, 1.0)], &LinkModel::IDEAL, Policy::new(PolicyKind::Fcfs), &ReferenceTimes::default(), &exact())
            .unwrap();
        assert!(r.records.is_empty());
        assert_eq!(r.makespan_s, 0.0);
    }

    #[test]
    fn predicted_needs_a_predictor() {
        let r = simulate(&[], &[EdgeNode::with_speed(0, 1.0)], &LinkModel::IDEAL, Policy::new(PolicyKind::GreedyPredicted), &ReferenceTimes::default(), &exact());
        assert!(matches!(r, Err(SimError::MissingPredictor(_))));
    }

    #[test]
    fn perfect_predictor_matches_oracle_without_noise() {
        let times = table(&[(5, 3.0), (10, 7.0), (15, 11.0)]);
        let tasks: Vec<_> = (0..30).map(|i| task(i, [5, 10, 15][i % 3], i as f64 * 0.8)).collect();
        let nodes: Vec<_> = [0.5, 1.0, 2.0].iter().enumerate().map(|(i, &s)| EdgeNode::with_speed(i, s)).collect();
        let link = LinkModel {
            bandwidth_mbps: 100.0,
            latency_s: 0.01,
        };
        let o = simulate(&tasks, &nodes, &link, Policy::new(PolicyKind::GreedyOracle), &times, &exact()).unwrap();
        let p = simulate(&tasks, &nodes, &link, Policy::predicted(&times), &times, &exact()).unwrap();
        let nodes_of = |r: &SimResult| r.records.iter().map(|x| x.node_id).collect::<Vec<_>>();
        assert_eq!(nodes_of(&o), nodes_of(&p));
    }

    #[test]
    fn noise_is_one_at_zero_sigma_and_seeded_otherwise() {
        assert_eq!(noise_factor(3, 7, 0.0), 1.0);
        assert_eq!(noise_factor(3, 7, 0.1), noise_factor(3, 7, 0.1));
        assert_ne!(noise_factor(3, 7, 0.1), noise_factor(3, 8, 0.1));
    }

    #[test]
    fn transfer_time_uses_megabits() {
        let l = LinkModel {
            bandwidth_mbps: 80.0,
            latency_s: 0.5,
        };
        assert_eq!(l.transfer_time(10.0), 1.5);
        assert_eq!(LinkModel::IDEAL.transfer_time(10.0), 0.0);
    }

    #[test]
    fn speed_scaling_of_predictions() {
        let times = table(&[(5, 12.0)]);
        let t = task(0, 5, 0.0);
        assert_eq!(predict_runtime(&t, &EdgeNode::with_speed(0, 1.0), &times).unwrap(), 12.0);
        assert_eq!(predict_runtime(&t, &EdgeNode::with_speed(0, 2.0), &times).unwrap(), 6.0);
    }

    #[test]
    fn offload_decisions() {
        let times = table(&[(5, 10.0)]);
        let t = task(0, 5, 0.0);
        let local = EdgeNode::with_speed(0, 1.0);
        let fast = [EdgeNode::with_speed(1, 10.0)];
        assert_eq!(decide_offload(&t, &local, &fast, &LinkModel::IDEAL, &times, 0.0).unwrap(), Decision::Remote(1));
        let slow_link = LinkModel {
            bandwidth_mbps: 0.1,
            latency_s: 0.0,
        };
        assert_eq!(decide_offload(&t, &local, &fast, &slow_link, &times, 0.0).unwrap(), Decision::Local);
        let twin = [EdgeNode::with_speed(1, 1.0)];
        assert_eq!(decide_offload(&t, &local, &twin, &LinkModel::IDEAL, &times, 0.0).unwrap(), Decision::Local);
        let twins = [EdgeNode::with_speed(3, 2.0), EdgeNode::with_speed(2, 2.0)];
        assert_eq!(decide_offload(&t, &local, &twins, &LinkModel::IDEAL, &times, 0.0).unwrap(), Decision::Remote(2));
        let busy = EdgeNode {
            busy_until: 50.0,
            ..local.clone()
        };
        assert_eq!(decide_offload(&t, &busy, &twin, &LinkModel::IDEAL, &times, 0.0).unwrap(), Decision::Remote(1));
        assert!(matches!(decide_offload(&t, &local, &[], &LinkModel::IDEAL, &times, 0.0), Err(SimError::NoRemotes)));
    }

    #[test]
    fn report_rows_and_ratios() {
        let times = table(&[(5, 3.0), (10, 7.0)]);
        let tasks: Vec<_> = (0..12).map(|i| {
            let mut t = task(i, [5, 10][i % 2], i as f64);
            t.deadline_s = Some(i as f64 + 6.0);
            t
        }).collect();
        let nodes = [EdgeNode::with_speed(0, 0.5), EdgeNode::with_speed(1, 2.0)];
        let results: Vec<SimResult> = [PolicyKind::Fcfs, PolicyKind::GreedyOracle]
            .into_iter()
            .map(|k| simulate(&tasks, &nodes, &LinkModel::IDEAL, Policy::new(k), &times, &exact()).unwrap())
            .collect();
        let rep = report(&results);
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.ratio(PolicyKind::GreedyOracle, PolicyKind::Fcfs).unwrap() <= 1.0);
        for r in &results {
            let misses = r.records.iter().filter(|x| x.finish_s > x.deadline_s.unwrap()).count();
            assert_eq!(r.deadline_violation_count, misses);
        }
        assert_eq!(rep.to_csv().lines().count(), 3);
    }

    #[test]
    fn workload_generator_is_seeded() {
        let choices = vec![(cfg_n(5), DatasetSpec::mnist_like(1000, 0)), (cfg_n(10), DatasetSpec::mnist_like(1000, 0))];
        let g = WorkloadGenConfig {
            num_tasks: 40,
            rate_per_s: 2.0,
            payload_mb_min: 1.0,
            payload_mb_max: 5.0,
            deadline_slack_s: Some(10.0),
            seed: 8,
        };
        let a = generate_workload(&g, &choices).unwrap();
        assert_eq!(a, generate_workload(&g, &choices).unwrap());
        assert_eq!(a.len(), 40);
        assert!(a.windows(2).all(|w| w[0].arrival_s <= w[1].arrival_s));
        assert!(a.iter().all(|t| t.validate().is_ok()));
    }

    #[test]
    fn reference_times_from_samples_use_median_and_skip_divergence() {
        let data = DatasetSpec::mnist_like(1000, 0);
        let mk = |t: f64, sf: f64, div: bool| ProfileSample {
            config: cfg_n(5),
            data: data.clone(),
            hardware: HardwareDescriptor::reference().with_speed(sf),
            params: 0,
            flops: 0,
            macs: 0,
            total_time_s: t,
            final_accuracy: 0.0,
            diverged: div,
            repeat_index: 0,
            seed: 0,
        };
        let t = ReferenceTimes::from_samples(&[mk(2.0, 1.0, false), mk(4.0, 2.0, false), mk(3.0, 1.0, false), mk(100.0, 1.0, true)]);
        assert_eq!(t.get(&task(0, 5, 0.0)).unwrap(), 3.0);
        assert!(matches!(t.get(&task(0, 10, 0.0)), Err(SimError::UnknownTask { .. })));
    }
}
