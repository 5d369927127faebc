//! Federated averaging of the MLP cost regressor across simulated clients.
//!
//! Normalization statistics come from the union of all clients' training rows
//! and are shared by every client. Each round the server broadcasts the global
//! weights, every client trains `local_epochs` on its own rows with its own
//! persistent optimizer state, and the server replaces the global weights with
//! the sample-count-weighted mean of the returned weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiler::ProfileSample;
use crate::regress::{
    encode, nrmse_with_range, Design, MlpRegressor, MlpTrainConfig, ModelFile, NormalizationStats, Predictor,
    RegressError, Target,
};
use crate::tinynn::{train_epochs, NnError, Network, OptimizerState, Targets};
use crate::workload::Family;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("need at least {needed} rows, found {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("invalid federated config: {0}")]
    Config(String),
    #[error(transparent)]
    Regress(#[from] RegressError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    ByConfigFamily,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    FedAvg,
}

fn default_holdout() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub partition: PartitionMode,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of each client's rows kept back as its holdout.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    /// Regressor architecture and optimizer; `epochs` is ignored.
    #[serde(default)]
    pub mlp: MlpTrainConfig,
}

fn default_aggregation() -> Aggregation {
    Aggregation::FedAvg
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.num_clients < 2 {
            return Err(FedError::Config("num_clients must be at least 2".into()));
        }
        if self.rounds < 1 {
            return Err(FedError::Config("rounds must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(FedError::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    pub rows: Vec<ProfileSample>,
    pub holdout: Vec<ProfileSample>,
}

impl ClientPartition {
    pub fn len(&self) -> usize {
        self.rows.len() + self.holdout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn split_holdout(client_id: usize, mut rows: Vec<ProfileSample>, fraction: f64) -> ClientPartition {
    let n = rows.len();
    let hold = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let holdout = rows.split_off(n - hold);
    ClientPartition {
        client_id,
        rows,
        holdout,
    }
}

fn shuffled(samples: &[ProfileSample], rng: &mut ChaCha8Rng) -> Vec<ProfileSample> {
    let mut v = samples.to_vec();
    v.shuffle(rng);
    v
}

fn round_robin(rows: Vec<ProfileSample>, k: usize) -> Vec<Vec<ProfileSample>> {
    let mut out = vec![Vec::new(); k];
    for (i, r) in rows.into_iter().enumerate() {
        out[i % k].push(r);
    }
    out
}

/// Splits the dataset among clients. `Iid` shuffles and deals rows
/// round-robin. `ByConfigFamily` gives the first `ceil(k/2)` clients only CNN
/// rows and the rest only MLP rows. The last `holdout_fraction` of every
/// client's rows (at least one) becomes its holdout.
pub fn partition(
    samples: &[ProfileSample],
    mode: PartitionMode,
    num_clients: usize,
    holdout_fraction: f64,
    seed: u64,
) -> Result<Vec<ClientPartition>, FedError> {
    if num_clients < 1 {
        return Err(FedError::Config("num_clients must be at least 1".into()));
    }
    let needed = 2 * num_clients;
    if samples.len() < needed {
        return Err(FedError::TooFewRows {
            needed,
            found: samples.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = match mode {
        PartitionMode::Iid => round_robin(shuffled(samples, &mut rng), num_clients),
        PartitionMode::ByConfigFamily => {
            if num_clients < 2 {
                return Err(FedError::Config("by_config_family needs at least 2 clients".into()));
            }
            let cnn_clients = num_clients.div_ceil(2);
            let of = |f: Family| -> Vec<ProfileSample> {
                samples.iter().filter(|s| s.config.arch.family == f).cloned().collect()
            };
            let (cnn, mlp) = (of(Family::Cnn), of(Family::Mlp));
            for (rows, k) in [(&cnn, cnn_clients), (&mlp, num_clients - cnn_clients)] {
                if rows.len() < 2 * k {
                    return Err(FedError::TooFewRows {
                        needed: 2 * k,
                        found: rows.len(),
                    });
                }
            }
            let mut g = round_robin(shuffled(&cnn, &mut rng), cnn_clients);
            g.extend(round_robin(shuffled(&mlp, &mut rng), num_clients - cnn_clients));
            g
        }
    };
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(id, rows)| split_holdout(id, rows, holdout_fraction))
        .collect())
}

/// One client's contribution to an aggregation round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub samples: usize,
    pub params: Vec<Vec<f64>>,
}

/// Sample-count-weighted mean of client parameters, summed in client-id
/// order and clamped to the per-parameter range of the inputs.
pub fn fed_avg(updates: &[ClientUpdate]) -> Option<Vec<Vec<f64>>> {
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let first = ordered.first()?;
    let total: usize = ordered.iter().map(|u| u.samples).sum();
    if total == 0 {
        return None;
    }
    let mut out: Vec<Vec<f64>> = first.params.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut lo: Vec<Vec<f64>> = first.params.clone();
    let mut hi: Vec<Vec<f64>> = first.params.clone();
    for u in &ordered {
        let c = u.samples as f64 / total as f64;
        for (b, buf) in u.params.iter().enumerate() {
            for (j, &w) in buf.iter().enumerate() {
                out[b][j] += c * w;
                lo[b][j] = lo[b][j].min(w);
                hi[b][j] = hi[b][j].max(w);
            }
        }
    }
    for b in 0..out.len() {
        for j in 0..out[b].len() {
            out[b][j] = out[b][j].clamp(lo[b][j], hi[b][j]);
        }
    }
    Some(out)
}

/// A client's scaled training data.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub client_id: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Clients whose local training diverged, with the reason.
    pub excluded: Vec<(usize, String)>,
}

fn params_of(net: &Network) -> Vec<Vec<f64>> {
    net.param_buffers().into_iter().map(<[f64]>::to_vec).collect()
}

fn set_params(net: &mut Network, params: &[Vec<f64>]) {
    for (dst, src) in net.param_buffers_mut().into_iter().zip(params) {
        dst.copy_from_slice(src);
    }
}

/// FedAvg on already-scaled client data, starting from `init`.
pub fn fed_train_scaled(
    clients: &[ClientData],
    init: Network,
    cfg: &FedConfig,
) -> Result<(Network, Vec<RoundLog>), FedError> {
    let mut order: Vec<&ClientData> = clients.iter().collect();
    order.sort_by_key(|c| c.client_id);
    let fresh = |net: &Network| net.optimizer(cfg.mlp.optimizer, cfg.mlp.learning_rate);
    let mut optimizers: Vec<OptimizerState> = order.iter().map(|_| fresh(&init)).collect();
    let flats: Vec<Vec<f64>> = order.iter().map(|c| c.x.concat()).collect();
    let mut global = init;
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut updates = Vec::new();
        let mut log = RoundLog {
            round,
            participants: Vec::new(),
            excluded: Vec::new(),
        };
        let mut next_epoch = global.epochs_trained;
        for (i, client) in order.iter().enumerate() {
            let mut local = global.clone();
            let targets = Targets::Values {
                data: &client.y,
                width: 1,
            };
            let batch = cfg.mlp.batch_size.clamp(1, client.y.len().max(1));
            match train_epochs(&mut local, &mut optimizers[i], &flats[i], targets, batch, cfg.local_epochs, |_, _| {}) {
                Ok(_) => {
                    next_epoch = local.epochs_trained;
                    log.participants.push(client.client_id);
                    updates.push(ClientUpdate {
                        client_id: client.client_id,
                        samples: client.y.len(),
                        params: params_of(&local),
                    });
                }
                Err(e @ NnError::Diverged { .. }) => {
                    optimizers[i] = fresh(&global);
                    log.excluded.push((client.client_id, e.to_string()));
                }
                Err(e) => return Err(e.into()),
            }
        }
        if let Some(avg) = fed_avg(&updates) {
            set_params(&mut global, &avg);
            global.epochs_trained = next_epoch;
        }
        logs.push(log);
    }
    Ok((global, logs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedOutcome {
    pub model: ModelFile,
    pub rounds: Vec<RoundLog>,
}

/// Federated training of one target's MLP regressor over client partitions.
pub fn fed_train(parts: &[ClientPartition], target: Target, cfg: &FedConfig) -> Result<FedOutcome, FedError> {
    let union: Vec<ProfileSample> = parts.iter().flat_map(|p| p.rows.iter().cloned()).collect();
    let first = union.first().ok_or(FedError::TooFewRows { needed: 1, found: 0 })?;
    let design = Design::fit(&union, target)?;
    let clients: Vec<ClientData> = parts
        .iter()
        .map(|p| {
            let d = design.apply(&p.rows, target);
            ClientData {
                client_id: p.client_id,
                x: d.x,
                y: d.y,
            }
        })
        .collect();
    let init = Network::mlp(crate::regress::NUM_FEATURES, &cfg.mlp.hidden, 1, cfg.seed);
    let (global, rounds) = fed_train_scaled(&clients, init, cfg)?;
    let predictor = Predictor::Mlp(MlpRegressor::from_network(cfg.mlp.hidden.clone(), global));
    Ok(FedOutcome {
        model: ModelFile::new(target, "federated", design.stats, first.hardware.clone(), predictor),
        rounds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    Federated,
    Centralized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub mode: ValidationMode,
    /// `(client_id, holdout nRMSE)`; empty in centralized mode.
    pub per_client: Vec<(usize, f64)>,
    /// Holdout-size-weighted mean (federated) or the server holdout nRMSE.
    pub nrmse: f64,
}

fn model_nrmse(model: &ModelFile, rows: &[ProfileSample], stats: &NormalizationStats) -> Result<f64, FedError> {
    let truth: Vec<f64> = rows.iter().map(|s| model.target.value(s)).collect();
    let pred: Vec<f64> = rows.iter().map(|s| model.predict(&encode(s))).collect();
    Ok(nrmse_with_range(&pred, &truth, stats.target_range())?)
}

/// Federated mode scores every client's holdout; centralized mode scores
/// the server holdout.
pub fn validate(
    model: &ModelFile,
    parts: &[ClientPartition],
    mode: ValidationMode,
    server_holdout: &[ProfileSample],
) -> Result<Validation, FedError> {
    let stats = &model.normalization;
    match mode {
        ValidationMode::Centralized => Ok(Validation {
            mode,
            per_client: Vec::new(),
            nrmse: model_nrmse(model, server_holdout, stats)?,
        }),
        ValidationMode::Federated => {
            let mut per_client = Vec::new();
            let (mut acc, mut weight) = (0.0, 0usize);
            for p in parts {
                let e = model_nrmse(model, &p.holdout, stats)?;
                acc += e * p.holdout.len() as f64;
                weight += p.holdout.len();
                per_client.push((p.client_id, e));
            }
            if weight == 0 {
                return Err(FedError::TooFewRows { needed: 1, found: 0 });
            }
            Ok(Validation {
                mode,
                per_client,
                nrmse: acc / weight as f64,
            })
        }
    }
}
