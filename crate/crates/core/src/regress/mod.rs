//! Cost predictors learned from the profiling dataset.
//!
//! Each target (total training FLOPs, forward MACs, log10 of training time)
//! gets its own model. Features and targets are min-max scaled with statistics
//! from the training split, and errors are reported as nRMSE: RMSE in target
//! units divided by the training-split target range.

mod bench;
mod gbdt;
mod mlp;

pub use bench::{benchmark, fit_model, ModelSpec, BenchEntry, BenchmarkConfig, BenchmarkReport, ConvergenceTrace, ModelFamily};
pub use gbdt::{best_split, fit_gbdt, SPLIT_TIE_TOLERANCE, Child, GbdtParams, GradientBoostedEnsemble, RegressionTree, Split, SplitNode};
pub use mlp::{fit_mlp_regressor, MlpRegressor, MlpTrainConfig};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiler::{ArchTag, HardwareDescriptor, ProfileError, ProfileSample};
use crate::tinynn::NnError;
use crate::workload::{arch_costs, DatasetSpec, Family, ModelConfig, Optimizer, WorkloadError};

pub const FEATURE_SCHEMA_VERSION: u32 = 1;
pub const NUM_FEATURES: usize = 21;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "depth",
    "hidden_units",
    "conv_layers",
    "log10_params",
    "log10_macs",
    "epochs",
    "batch_size",
    "log10_learning_rate",
    "num_samples",
    "clock_ghz",
    "logical_cores",
    "speed_factor",
    "family_mlp",
    "family_cnn",
    "opt_adam",
    "opt_sgd",
    "opt_rmsprop",
    "opt_adagrad",
    "arch_x86_64",
    "arch_aarch64",
    "arch_other",
];

const FAMILY_OFFSET: usize = 12;
const OPTIMIZER_OFFSET: usize = 14;
const ARCH_OFFSET: usize = 18;

#[derive(Debug, Error)]
pub enum RegressError {
    #[error("need at least {needed} usable rows, found {found}")]
    InsufficientRows { needed: usize, found: usize },
    #[error("length mismatch: {0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("regressor training diverged: {0}")]
    Diverged(NnError),
    #[error("feature schema version {found} is not supported (expected {expected})")]
    Schema { expected: u32, found: u32 },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Fixed-width encoding of one (config, data, hardware) triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; NUM_FEATURES]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn log10_pos(v: f64) -> f64 {
    v.max(f64::MIN_POSITIVE).log10()
}

fn encode_with_counts(
    config: &ModelConfig,
    data: &DatasetSpec,
    hw: &HardwareDescriptor,
    params: u64,
    macs: u64,
) -> FeatureVector {
    let arch = &config.arch;
    let mut v = [0.0; NUM_FEATURES];
    v[0] = arch.depth() as f64;
    v[1] = arch.hidden_units() as f64;
    v[2] = arch.conv_layers.len() as f64;
    v[3] = log10_pos(params as f64);
    v[4] = log10_pos(macs as f64);
    v[5] = config.epochs as f64;
    v[6] = config.batch_size as f64;
    v[7] = log10_pos(config.learning_rate);
    v[8] = data.num_samples as f64;
    v[9] = hw.clock_ghz;
    v[10] = hw.logical_cores as f64;
    v[11] = hw.speed_factor;
    let family = match arch.family {
        Family::Mlp => 0,
        Family::Cnn => 1,
    };
    v[FAMILY_OFFSET + family] = 1.0;
    let opt = Optimizer::ALL
        .iter()
        .position(|&o| o == config.optimizer)
        .expect("optimizer listed in ALL");
    v[OPTIMIZER_OFFSET + opt] = 1.0;
    let tag = ArchTag::ALL
        .iter()
        .position(|&t| t == hw.arch_tag)
        .expect("arch tag listed in ALL");
    v[ARCH_OFFSET + tag] = 1.0;
    FeatureVector(v)
}

/// Encodes a profiled sample using its recorded analytic counts.
pub fn encode(sample: &ProfileSample) -> FeatureVector {
    encode_with_counts(&sample.config, &sample.data, &sample.hardware, sample.params, sample.macs)
}

/// Encodes a workload that has not been profiled; counts are computed.
pub fn encode_parts(
    config: &ModelConfig,
    data: &DatasetSpec,
    hw: &HardwareDescriptor,
) -> Result<FeatureVector, RegressError> {
    let (params, macs) = arch_costs(&config.arch, data)?;
    Ok(encode_with_counts(config, data, hw, params, macs))
}

/// Prediction targets. Time is modelled as `log10(total_time_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Flops,
    Macs,
    LogTime,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Flops, Target::Macs, Target::LogTime];

    pub fn value(self, sample: &ProfileSample) -> f64 {
        match self {
            Target::Flops => sample.flops as f64,
            Target::Macs => sample.macs as f64,
            Target::LogTime => log10_pos(sample.total_time_s),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Flops => "flops",
            Target::Macs => "macs",
            Target::LogTime => "log_time",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "flops" => Ok(Target::Flops),
            "macs" => Ok(Target::Macs),
            "log_time" | "time" | "total_time" => Ok(Target::LogTime),
            _ => Err(format!("unknown target {s:?} (expected flops, macs or log_time)")),
        }
    }
}

/// Per-column min/max of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub feature_min: Vec<f64>,
    pub feature_max: Vec<f64>,
    pub target_min: f64,
    pub target_max: f64,
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

impl NormalizationStats {
    pub fn fit(features: &[FeatureVector], targets: &[f64]) -> Result<Self, RegressError> {
        if features.is_empty() {
            return Err(RegressError::Empty);
        }
        if features.len() != targets.len() {
            return Err(RegressError::LengthMismatch(features.len(), targets.len()));
        }
        let (feature_min, feature_max) = (0..NUM_FEATURES)
            .map(|j| min_max(features.iter().map(|f| f.0[j])))
            .unzip();
        let (target_min, target_max) = min_max(targets.iter().copied());
        Ok(Self {
            feature_min,
            feature_max,
            target_min,
            target_max,
        })
    }

    /// Features scaled to `[0, 1]`; values outside the training range clamp.
    pub fn scale_features(&self, f: &FeatureVector) -> Vec<f64> {
        f.0.iter()
            .enumerate()
            .map(|(j, &v)| scale(v, self.feature_min[j], self.feature_max[j]).clamp(0.0, 1.0))
            .collect()
    }

    pub fn scale_target(&self, y: f64) -> f64 {
        scale(y, self.target_min, self.target_max)
    }

    pub fn unscale_target(&self, z: f64) -> f64 {
        self.target_min + z * self.target_range()
    }

    pub fn target_range(&self) -> f64 {
        self.target_max - self.target_min
    }
}

/// RMSE divided by the training target range; zero when that range is zero.
pub fn nrmse(predictions: &[f64], truths: &[f64], stats: &NormalizationStats) -> Result<f64, RegressError> {
    nrmse_with_range(predictions, truths, stats.target_range())
}

pub fn nrmse_with_range(predictions: &[f64], truths: &[f64], range: f64) -> Result<f64, RegressError> {
    if predictions.len() != truths.len() {
        return Err(RegressError::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(RegressError::Empty);
    }
    if range <= 0.0 {
        return Ok(0.0);
    }
    let mse = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(mse.sqrt() / range)
}

/// Seeded shuffle split; the first `round(train_fraction * n)` shuffled
/// indices (at least 1, at most `n - 1`) form the training split.
pub fn train_test_split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = if n < 2 {
        n
    } else {
        ((train_fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let test = idx.split_off(cut);
    (idx, test)
}

/// Samples usable for regression: diverged runs are dropped unless asked for.
pub fn usable_samples(samples: &[ProfileSample], include_diverged: bool) -> Vec<ProfileSample> {
    samples
        .iter()
        .filter(|s| include_diverged || !s.diverged)
        .cloned()
        .collect()
}

/// Training matrix for one target: scaled features and scaled targets.
#[derive(Debug, Clone)]
pub struct Design {
    pub stats: NormalizationStats,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    /// Unscaled targets, for error reporting.
    pub y_raw: Vec<f64>,
}

impl Design {
    /// Fits normalization on `train` and scales it.
    pub fn fit(train: &[ProfileSample], target: Target) -> Result<Self, RegressError> {
        let features: Vec<FeatureVector> = train.iter().map(encode).collect();
        let y_raw: Vec<f64> = train.iter().map(|s| target.value(s)).collect();
        let stats = NormalizationStats::fit(&features, &y_raw)?;
        Ok(Self::with_stats(&features, y_raw, stats))
    }

    /// Scales further rows with existing statistics.
    pub fn apply(&self, rows: &[ProfileSample], target: Target) -> Self {
        let features: Vec<FeatureVector> = rows.iter().map(encode).collect();
        let y_raw = rows.iter().map(|s| target.value(s)).collect();
        Self::with_stats(&features, y_raw, self.stats.clone())
    }

    fn with_stats(features: &[FeatureVector], y_raw: Vec<f64>, stats: NormalizationStats) -> Self {
        Self {
            x: features.iter().map(|f| stats.scale_features(f)).collect(),
            y: y_raw.iter().map(|&v| stats.scale_target(v)).collect(),
            y_raw,
            stats,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// The fitted predictor inside a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predictor {
    Gbdt(GradientBoostedEnsemble),
    Mlp(MlpRegressor),
}

impl Predictor {
    /// Prediction in scaled target units for scaled features.
    pub fn predict_scaled(&self, x: &[f64]) -> f64 {
        match self {
            Predictor::Gbdt(e) => e.predict(x),
            Predictor::Mlp(m) => m.predict_one(x),
        }
    }
}

/// Persisted cost model for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub feature_names: Vec<String>,
    pub target: Target,
    /// `centralized` or `federated`.
    pub provenance: String,
    pub normalization: NormalizationStats,
    /// Hardware the training rows were profiled on.
    pub reference_hardware: HardwareDescriptor,
    pub predictor: Predictor,
}

impl ModelFile {
    pub fn new(
        target: Target,
        provenance: &str,
        normalization: NormalizationStats,
        reference_hardware: HardwareDescriptor,
        predictor: Predictor,
    ) -> Self {
        Self {
            schema_version: FEATURE_SCHEMA_VERSION,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            target,
            provenance: provenance.to_string(),
            normalization,
            reference_hardware,
            predictor,
        }
    }

    pub fn check_schema(&self) -> Result<(), RegressError> {
        if self.schema_version != FEATURE_SCHEMA_VERSION || self.feature_names.len() != NUM_FEATURES {
            return Err(RegressError::Schema {
                expected: FEATURE_SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, RegressError> {
        let m: Self = serde_json::from_str(text)?;
        m.check_schema()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    /// Prediction in target units (log10 seconds for the time target).
    pub fn predict(&self, features: &FeatureVector) -> f64 {
        let x = self.normalization.scale_features(features);
        self.normalization.unscale_target(self.predictor.predict_scaled(&x))
    }

    pub fn predict_samples(&self, samples: &[ProfileSample]) -> Vec<f64> {
        samples.iter().map(|s| self.predict(&encode(s))).collect()
    }
}

/// Mean of a slice; a constant slice returns its value exactly.
pub(crate) fn mean(v: &[f64]) -> f64 {
    match v.first() {
        None => 0.0,
        Some(&first) if v.iter().all(|&x| x == first) => first,
        Some(_) => v.iter().sum::<f64>() / v.len() as f64,
    }
}
