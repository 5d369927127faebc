//! Sweep execution and the profiling dataset.
//!
//! Measured runs are strictly serial. Each run times only the training loop
//! with a monotonic clock; data synthesis and network construction happen
//! before the clock starts. Rows are appended to the dataset CSV and flushed
//! one at a time, and a sweep skips `(config, repeat)` keys already present in
//! the file, so an interrupted sweep can simply be started again.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::hint::black_box;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tinynn::{self, build_network, NnError};
use crate::workload::{count_costs, enumerate_table1_grid, DatasetSpec, Family, ModelArch, ModelConfig, WorkloadError};

/// Environment variable that overrides the sweep output directory.
pub const OUTPUT_DIR_ENV: &str = "PROFILER_OUT";
pub const DATASET_FILE_NAME: &str = "profile.csv";

pub const CSV_COLUMNS: [&str; 24] = [
    "family",
    "conv_spec",
    "mlp_hidden",
    "epochs",
    "optimizer",
    "learning_rate",
    "batch_size",
    "num_samples",
    "input_h",
    "input_w",
    "input_c",
    "num_classes",
    "arch_tag",
    "clock_ghz",
    "logical_cores",
    "speed_factor",
    "params",
    "flops",
    "macs",
    "total_time_s",
    "final_accuracy",
    "diverged",
    "repeat_index",
    "seed",
];

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("malformed dataset row {row} in {path}: {msg}")]
    Row { path: PathBuf, row: usize, msg: String },
    #[error("dataset header mismatch in {0}")]
    Header(PathBuf),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid sweep plan: {0}")]
    Plan(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ProfileError + '_ {
    move |source| ProfileError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchTag {
    #[serde(rename = "x86_64")]
    X86_64,
    #[serde(rename = "aarch64")]
    Aarch64,
    #[serde(rename = "other")]
    Other,
}

impl ArchTag {
    pub const ALL: [ArchTag; 3] = [ArchTag::X86_64, ArchTag::Aarch64, ArchTag::Other];

    pub fn host() -> Self {
        match std::env::consts::ARCH {
            "x86_64" => ArchTag::X86_64,
            "aarch64" => ArchTag::Aarch64,
            _ => ArchTag::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArchTag::X86_64 => "x86_64",
            ArchTag::Aarch64 => "aarch64",
            ArchTag::Other => "other",
        }
    }
}

impl fmt::Display for ArchTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "x86_64" => Ok(ArchTag::X86_64),
            "aarch64" => Ok(ArchTag::Aarch64),
            "other" => Ok(ArchTag::Other),
            _ => Err(format!("unknown arch tag {s:?}")),
        }
    }
}

/// Static capability features of a compute node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareDescriptor {
    pub arch_tag: ArchTag,
    pub clock_ghz: f64,
    pub logical_cores: usize,
    /// Throughput relative to the reference machine (reference = 1.0).
    pub speed_factor: f64,
    #[serde(default)]
    pub label: String,
}

impl HardwareDescriptor {
    /// The reference machine: x86_64, speed factor 1.0.
    pub fn reference() -> Self {
        Self {
            arch_tag: ArchTag::X86_64,
            clock_ghz: REFERENCE_CLOCK_GHZ,
            logical_cores: 1,
            speed_factor: 1.0,
            label: "reference".into(),
        }
    }

    pub fn with_speed(mut self, speed_factor: f64) -> Self {
        self.speed_factor = speed_factor;
        self
    }
}

/// Fields that replace probed values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardwareOverrides {
    pub arch_tag: Option<ArchTag>,
    pub clock_ghz: Option<f64>,
    pub logical_cores: Option<usize>,
    pub speed_factor: Option<f64>,
    pub label: Option<String>,
}

/// Median calibration time on the reference machine, seconds.
pub const REFERENCE_CALIBRATION_SECONDS: f64 = 0.0295;
/// Clock of the reference machine; used when the host clock is unreadable.
pub const REFERENCE_CLOCK_GHZ: f64 = 2.1;
const CALIBRATION_DIM: usize = 128;
const CALIBRATION_REPS: usize = 64;
const CALIBRATION_TRIALS: usize = 5;

/// One pass of the calibration kernel: a fixed, deterministic naive
/// 128x128 matrix product repeated 64 times.
fn calibration_kernel() -> f64 {
    let n = CALIBRATION_DIM;
    let a: Vec<f64> = (0..n * n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
    let b: Vec<f64> = (0..n * n).map(|i| ((i * 104_729) % 1000) as f64 / 1000.0).collect();
    let mut c = vec![0.0; n * n];
    for _ in 0..CALIBRATION_REPS {
        let a = black_box(&a);
        for i in 0..n {
            for k in 0..n {
                let aik = a[i * n + k];
                let (row, brow) = (&mut c[i * n..(i + 1) * n], &b[k * n..(k + 1) * n]);
                for (cv, &bv) in row.iter_mut().zip(brow) {
                    *cv += aik * bv;
                }
            }
        }
    }
    black_box(c[n + 1])
}

/// Median wall time of the calibration kernel.
pub fn calibration_seconds() -> f64 {
    let mut times: Vec<f64> = (0..CALIBRATION_TRIALS)
        .map(|_| {
            let t = Instant::now();
            black_box(calibration_kernel());
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

pub fn speed_factor_from_calibration(measured_seconds: f64) -> f64 {
    REFERENCE_CALIBRATION_SECONDS / measured_seconds.max(1e-9)
}

fn cpuinfo_field(text: &str, key: &str) -> Option<String> {
    text.lines()
        .find(|l| l.split(':').next().map(str::trim) == Some(key))
        .and_then(|l| l.split_once(':'))
        .map(|(_, v)| v.trim().to_string())
}

/// Describes the host. Architecture and core count come from the runtime,
/// clock and label from `/proc/cpuinfo` when readable, the speed factor from
/// the calibration kernel. Any override wins over the probed value.
pub fn probe_hardware(overrides: &HardwareOverrides) -> HardwareDescriptor {
    let cpuinfo = fs::read_to_string("/proc/cpuinfo").ok();
    let speed_factor = overrides
        .speed_factor
        .unwrap_or_else(|| speed_factor_from_calibration(calibration_seconds()));
    let probed_clock = cpuinfo
        .as_deref()
        .and_then(|t| cpuinfo_field(t, "cpu MHz"))
        .and_then(|v| v.parse::<f64>().ok())
        .filter(|mhz| *mhz > 0.0)
        .map(|mhz| mhz / 1000.0);
    let label = cpuinfo
        .as_deref()
        .and_then(|t| cpuinfo_field(t, "model name"))
        .unwrap_or_else(|| "unknown".to_string());
    HardwareDescriptor {
        arch_tag: overrides.arch_tag.unwrap_or_else(ArchTag::host),
        clock_ghz: overrides
            .clock_ghz
            .or(probed_clock)
            .unwrap_or(REFERENCE_CLOCK_GHZ * speed_factor),
        logical_cores: overrides
            .logical_cores
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
        speed_factor,
        label: overrides.label.clone().unwrap_or(label),
    }
}

/// One profiling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub config: ModelConfig,
    pub data: DatasetSpec,
    pub hardware: HardwareDescriptor,
    pub params: u64,
    /// Total training FLOPs.
    pub flops: u64,
    /// Forward MACs per sample.
    pub macs: u64,
    pub total_time_s: f64,
    pub final_accuracy: f64,
    pub diverged: bool,
    pub repeat_index: usize,
    pub seed: u64,
}

impl ProfileSample {
    pub fn resume_key(&self) -> (String, usize) {
        (self.config.key(), self.repeat_index)
    }

    fn to_record(&self) -> Vec<String> {
        let c = &self.config;
        let d = &self.data;
        let h = &self.hardware;
        vec![
            c.arch.family.to_string(),
            c.arch.conv_spec_string(),
            c.arch.mlp_hidden_string(),
            c.epochs.to_string(),
            c.optimizer.to_string(),
            c.learning_rate.to_string(),
            c.batch_size.to_string(),
            d.num_samples.to_string(),
            d.input_height.to_string(),
            d.input_width.to_string(),
            d.input_channels.to_string(),
            d.num_classes.to_string(),
            h.arch_tag.to_string(),
            h.clock_ghz.to_string(),
            h.logical_cores.to_string(),
            h.speed_factor.to_string(),
            self.params.to_string(),
            self.flops.to_string(),
            self.macs.to_string(),
            self.total_time_s.to_string(),
            self.final_accuracy.to_string(),
            self.diverged.to_string(),
            self.repeat_index.to_string(),
            self.seed.to_string(),
        ]
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self, String> {
        if rec.len() != CSV_COLUMNS.len() {
            return Err(format!("expected {} fields, found {}", CSV_COLUMNS.len(), rec.len()));
        }
        fn num<T: FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T, String> {
            rec[i]
                .trim()
                .parse()
                .map_err(|_| format!("bad {} value {:?}", CSV_COLUMNS[i], &rec[i]))
        }
        let family: Family = rec[0].parse().map_err(|e: WorkloadError| e.to_string())?;
        let arch = ModelArch::from_compact(family, &rec[1], &rec[2]).map_err(|e| e.to_string())?;
        let config = ModelConfig {
            arch,
            epochs: num(rec, 3)?,
            optimizer: rec[4].parse().map_err(|e: WorkloadError| e.to_string())?,
            learning_rate: num(rec, 5)?,
            batch_size: num(rec, 6)?,
        };
        let data = DatasetSpec {
            num_samples: num(rec, 7)?,
            input_height: num(rec, 8)?,
            input_width: num(rec, 9)?,
            input_channels: num(rec, 10)?,
            num_classes: num(rec, 11)?,
            seed: 0,
        };
        let hardware = HardwareDescriptor {
            arch_tag: rec[12].parse()?,
            clock_ghz: num(rec, 13)?,
            logical_cores: num(rec, 14)?,
            speed_factor: num(rec, 15)?,
            label: String::new(),
        };
        Ok(Self {
            config,
            data,
            hardware,
            params: num(rec, 16)?,
            flops: num(rec, 17)?,
            macs: num(rec, 18)?,
            total_time_s: num(rec, 19)?,
            final_accuracy: num(rec, 20)?,
            diverged: num(rec, 21)?,
            repeat_index: num(rec, 22)?,
            seed: num(rec, 23)?,
        })
    }
}

/// Reads a profiling dataset CSV.
pub fn read_dataset(path: &Path) -> Result<Vec<ProfileSample>, ProfileError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|source| ProfileError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(ProfileError::Header(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|source| ProfileError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        out.push(ProfileSample::from_record(&rec).map_err(|msg| ProfileError::Row {
            path: path.to_path_buf(),
            row: i + 1,
            msg,
        })?);
    }
    Ok(out)
}

/// Writes a complete dataset file (header plus rows), replacing any existing one.
pub fn write_dataset(path: &Path, samples: &[ProfileSample]) -> Result<(), ProfileError> {
    let mut sink = DatasetSink::create(path)?;
    for s in samples {
        sink.append(s)?;
    }
    Ok(())
}

/// Append-only dataset writer that flushes after every row.
pub struct DatasetSink {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl DatasetSink {
    fn create(path: &Path) -> Result<Self, ProfileError> {
        let file = File::create(path).map_err(io_err(path))?;
        Self::with_header(path, file)
    }

    fn with_header(path: &Path, file: File) -> Result<Self, ProfileError> {
        let mut sink = Self {
            path: path.to_path_buf(),
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        };
        sink.write_record(CSV_COLUMNS.iter().map(|s| s.to_string()).collect())?;
        Ok(sink)
    }

    /// Opens `path` for appending, writing the header if the file is new or
    /// empty. Returns the resume keys of rows already present.
    pub fn open_append(path: &Path) -> Result<(Self, HashSet<(String, usize)>), ProfileError> {
        let existing = match fs::metadata(path) {
            Ok(m) if m.len() > 0 => {
                repair_trailing_partial_row(path)?;
                read_dataset(path)?.iter().map(ProfileSample::resume_key).collect()
            }
            _ => {
                let file = File::create(path).map_err(io_err(path))?;
                return Ok((Self::with_header(path, file)?, HashSet::new()));
            }
        };
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        Ok((
            Self {
                path: path.to_path_buf(),
                writer: csv::WriterBuilder::new().has_headers(false).from_writer(file),
            },
            existing,
        ))
    }

    fn write_record(&mut self, fields: Vec<String>) -> Result<(), ProfileError> {
        self.writer.write_record(&fields).map_err(|source| ProfileError::Csv {
            path: self.path.clone(),
            source,
        })?;
        self.writer.flush().map_err(io_err(&self.path))
    }

    pub fn append(&mut self, sample: &ProfileSample) -> Result<(), ProfileError> {
        self.write_record(sample.to_record())
    }
}

/// A crash mid-write can leave a row without its newline; drop it so the
/// resumed sweep re-runs that key.
fn repair_trailing_partial_row(path: &Path) -> Result<(), ProfileError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.last() == Some(&b'\n') {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    fs::write(path, &bytes[..keep]).map_err(io_err(path))
}

/// Trains one configuration and records its measurements. Training
/// divergence is reported through `diverged`; other failures are errors.
pub fn run_one(
    config: &ModelConfig,
    data: &tinynn::Dataset,
    hardware: &HardwareDescriptor,
    seed: u64,
    repeat_index: usize,
) -> Result<ProfileSample, ProfileError> {
    let costs = count_costs(config, &data.spec)?;
    let mut net = build_network(&config.arch, &data.spec, seed)?;
    let mut opt = net.optimizer(config.optimizer, config.learning_rate);
    let start = Instant::now();
    let result = tinynn::train(&mut net, &mut opt, data, config.epochs, config.batch_size);
    let elapsed = start.elapsed();
    let (final_accuracy, diverged) = match result {
        Ok(out) => (out.final_accuracy, false),
        Err(NnError::Diverged { .. }) => (0.0, true),
        Err(e) => return Err(e.into()),
    };
    Ok(ProfileSample {
        config: config.clone(),
        data: data.spec.clone(),
        hardware: hardware.clone(),
        params: costs.params,
        flops: costs.training_flops_total,
        macs: costs.forward_macs_per_sample,
        total_time_s: elapsed.as_secs_f64().max(1e-9),
        final_accuracy,
        diverged,
        repeat_index,
        seed,
    })
}

fn default_repeats() -> usize {
    1
}

fn default_warmup() -> usize {
    2
}

/// What to run. When `configs` is empty the plan draws `grid_sample`
/// configurations from the full grid (or takes the whole grid when that is
/// unset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    #[serde(default)]
    pub configs: Vec<ModelConfig>,
    #[serde(default)]
    pub grid_sample: Option<usize>,
    pub data: DatasetSpec,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_warmup")]
    pub warmup_runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hardware: HardwareOverrides,
}

impl SweepPlan {
    pub fn grid_subsample(n: usize, data: DatasetSpec, seed: u64) -> Self {
        Self {
            configs: Vec::new(),
            grid_sample: Some(n),
            data,
            repeats: 1,
            warmup_runs: 2,
            seed,
            hardware: HardwareOverrides::default(),
        }
    }

    /// The configurations this plan runs, in execution order.
    pub fn resolved_configs(&self) -> Result<Vec<ModelConfig>, ProfileError> {
        if !self.configs.is_empty() {
            return Ok(self.configs.clone());
        }
        let grid = enumerate_table1_grid();
        match self.grid_sample {
            None => Ok(grid),
            Some(n) if n > grid.len() => Err(ProfileError::Plan(format!(
                "grid_sample {n} exceeds grid size {}",
                grid.len()
            ))),
            Some(n) => Ok(sample_without_replacement(&grid, n, self.seed)),
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.repeats == 0 {
            return Err(ProfileError::Plan("repeats must be at least 1".into()));
        }
        if self.configs.is_empty() && self.grid_sample == Some(0) {
            return Err(ProfileError::Plan("empty plan".into()));
        }
        self.data.validate()?;
        Ok(())
    }
}

/// Seeded selection of `n` distinct items, returned in their original order.
pub fn sample_without_replacement<T: Clone>(items: &[T], n: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, items.len(), n.min(items.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// Network seed of repeat `r`.
pub fn run_seed(plan_seed: u64, repeat_index: usize) -> u64 {
    plan_seed.wrapping_add(repeat_index as u64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub dataset_path: PathBuf,
    pub planned: usize,
    pub written: usize,
    pub skipped_existing: usize,
    pub diverged: usize,
    pub failures: Vec<String>,
    pub hardware: HardwareDescriptor,
    pub elapsed_s: f64,
}

/// Progress callback payload.
pub struct SweepProgress<'a> {
    pub done: usize,
    pub planned: usize,
    pub sample: &'a ProfileSample,
}

/// Output directory: `PROFILER_OUT` when set, otherwise `default`.
pub fn output_dir(default: &Path) -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map_or_else(|| default.to_path_buf(), PathBuf::from)
}

/// Runs a plan serially into `out_dir/profile.csv`.
pub fn run_sweep(
    plan: &SweepPlan,
    out_dir: &Path,
    mut progress: impl FnMut(SweepProgress<'_>),
) -> Result<SweepSummary, ProfileError> {
    plan.validate()?;
    let started = Instant::now();
    let configs = plan.resolved_configs()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let path = out_dir.join(DATASET_FILE_NAME);
    let (mut sink, existing) = DatasetSink::open_append(&path)?;
    let hardware = probe_hardware(&plan.hardware);
    let data = tinynn::synthesize(&plan.data)?;

    let pending: Vec<(&ModelConfig, usize)> = configs
        .iter()
        .flat_map(|c| (0..plan.repeats).map(move |r| (c, r)))
        .filter(|(c, r)| !existing.contains(&(c.key(), *r)))
        .collect();
    let planned = configs.len() * plan.repeats;
    let mut summary = SweepSummary {
        dataset_path: path.clone(),
        planned,
        written: 0,
        skipped_existing: planned - pending.len(),
        diverged: 0,
        failures: Vec::new(),
        hardware: hardware.clone(),
        elapsed_s: 0.0,
    };

    if let Some((first, _)) = pending.first() {
        // Warm-up runs use one epoch of the first pending config.
        let warm = ModelConfig {
            epochs: first.epochs.min(1),
            ..(*first).clone()
        };
        for w in 0..plan.warmup_runs {
            let _ = run_one(&warm, &data, &hardware, plan.seed ^ 0x5741_524d ^ w as u64, 0);
        }
    }

    for (config, repeat) in pending {
        match run_one(config, &data, &hardware, run_seed(plan.seed, repeat), repeat) {
            Ok(sample) => {
                sink.append(&sample)?;
                summary.written += 1;
                summary.diverged += usize::from(sample.diverged);
                progress(SweepProgress {
                    done: summary.skipped_existing + summary.written,
                    planned,
                    sample: &sample,
                });
            }
            Err(e @ (ProfileError::Io { .. } | ProfileError::Csv { .. })) => return Err(e),
            Err(e) => summary.failures.push(format!("{} repeat {repeat}: {e}", config.key())),
        }
    }
    summary.elapsed_s = started.elapsed().as_secs_f64();
    Ok(summary)
}

/// Median absolute deviation over median of repeated timings, per config.
/// Used as a timing-methodology sanity figure.
pub fn timing_dispersion(samples: &[ProfileSample]) -> Vec<(String, f64)> {
    let mut groups: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for s in samples.iter().filter(|s| !s.diverged) {
        groups.entry(s.config.key()).or_default().push(s.total_time_s);
    }
    groups
        .into_iter()
        .filter(|(_, t)| t.len() >= 2)
        .map(|(k, mut t)| {
            let med = median(&mut t);
            let mut dev: Vec<f64> = t.iter().map(|v| (v - med).abs()).collect();
            (k, median(&mut dev) / med)
        })
        .collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Reads a sweep plan JSON file.
pub fn read_plan(path: &Path) -> Result<SweepPlan, ProfileError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ProfileError::Plan(e.to_string()))
}

/// Counts lines of a dataset file excluding the header.
pub fn count_rows(path: &Path) -> Result<usize, ProfileError> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(BufReader::new(f).lines().count().saturating_sub(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{ConvLayerSpec, Optimizer};

    fn tiny_data() -> DatasetSpec {
        DatasetSpec {
            num_samples: 64,
            input_height: 6,
            input_width: 6,
            input_channels: 1,
            num_classes: 3,
            seed: 5,
        }
    }

    fn tiny_configs(n: usize) -> Vec<ModelConfig> {
        (0..n)
            .map(|i| ModelConfig {
                arch: if i % 2 == 0 {
                    ModelArch::mlp(&[8 + i])
                } else {
                    ModelArch::cnn(&[ConvLayerSpec::new(2 + i, 3, true)])
                },
                epochs: 1 + i % 2,
                optimizer: Optimizer::ALL[i % 4],
                learning_rate: 0.01,
                batch_size: 16,
            })
            .collect()
    }

    fn tiny_plan(n: usize) -> SweepPlan {
        SweepPlan {
            configs: tiny_configs(n),
            grid_sample: None,
            data: tiny_data(),
            repeats: 1,
            warmup_runs: 1,
            seed: 3,
            hardware: HardwareOverrides {
                speed_factor: Some(1.0),
                ..Default::default()
            },
        }
    }

    #[test]
    fn reference_speed_factor_is_one() {
        assert_eq!(speed_factor_from_calibration(REFERENCE_CALIBRATION_SECONDS), 1.0);
        assert_eq!(HardwareDescriptor::reference().speed_factor, 1.0);
    }

    #[test]
    fn twice_as_fast_host_scores_two() {
        let sf = speed_factor_from_calibration(REFERENCE_CALIBRATION_SECONDS / 2.0);
        assert!((sf - 2.0).abs() <= 0.2);
    }

    #[test]
    fn overrides_pass_through() {
        let hw = probe_hardware(&HardwareOverrides {
            clock_ghz: Some(3.5),
            speed_factor: Some(1.5),
            label: Some("edge-a".into()),
            ..Default::default()
        });
        assert_eq!(hw.clock_ghz, 3.5);
        assert_eq!(hw.speed_factor, 1.5);
        assert_eq!(hw.label, "edge-a");
        assert!(hw.logical_cores >= 1);
    }

    #[test]
    fn calibration_is_positive() {
        let t = calibration_seconds();
        assert!(t > 0.0 && t.is_finite());
    }

    #[test]
    fn run_one_attaches_analytic_counts() {
        let data = tinynn::synthesize(&DatasetSpec::mnist_like(1000, 1)).unwrap();
        let config = ModelConfig {
            arch: ModelArch::mlp(&[100, 50]),
            epochs: 5,
            optimizer: Optimizer::Adam,
            learning_rate: 0.001,
            batch_size: 128,
        };
        let hw = HardwareDescriptor::reference();
        let a = run_one(&config, &data, &hw, 7, 0).unwrap();
        let b = run_one(&config, &data, &hw, 7, 1).unwrap();
        assert_eq!(a.flops, 2_517_000_000);
        assert_eq!(a.macs, 83_900);
        assert_eq!(a.params, 84_060);
        assert_eq!((a.flops, a.macs, a.params), (b.flops, b.macs, b.params));
        assert!(a.total_time_s > 0.0);
        assert_eq!(a.flops, 2 * a.macs * 3 * 1000 * 5);
    }

    #[test]
    fn diverged_runs_are_flagged_not_dropped() {
        let data = tinynn::synthesize(&DatasetSpec::mnist_like(200, 3)).unwrap();
        let config = ModelConfig {
            arch: ModelArch::mlp(&[100, 50]),
            epochs: 3,
            optimizer: Optimizer::Sgd,
            learning_rate: 10.0,
            batch_size: 16,
        };
        let s = run_one(&config, &data, &HardwareDescriptor::reference(), 0, 0).unwrap();
        assert!(s.diverged);
        assert!(s.total_time_s > 0.0);
    }

    #[test]
    fn sweep_writes_one_row_per_config_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let plan = tiny_plan(10);
        let summary = run_sweep(&plan, dir.path(), |_| {}).unwrap();
        assert_eq!(summary.written, 10);
        assert!(summary.failures.is_empty());
        let path = dir.path().join(DATASET_FILE_NAME);
        assert_eq!(count_rows(&path).unwrap(), 10);

        // simulate an interrupted sweep: drop the last three rows
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        fs::write(&path, lines[..lines.len() - 3].join("\n") + "\n").unwrap();
        let again = run_sweep(&plan, dir.path(), |_| {}).unwrap();
        assert_eq!(again.skipped_existing, 7);
        assert_eq!(again.written, 3);
        let rows = read_dataset(&path).unwrap();
        assert_eq!(rows.len(), 10);
        let keys: HashSet<_> = rows.iter().map(ProfileSample::resume_key).collect();
        assert_eq!(keys.len(), 10);
    }

    #[test]
    fn partial_trailing_row_is_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let plan = tiny_plan(3);
        run_sweep(&plan, dir.path(), |_| {}).unwrap();
        let path = dir.path().join(DATASET_FILE_NAME);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() - 10]).unwrap();
        let again = run_sweep(&plan, dir.path(), |_| {}).unwrap();
        assert_eq!(again.written, 1);
        assert_eq!(read_dataset(&path).unwrap().len(), 3);
    }

    #[test]
    fn repeats_multiply_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan(2);
        plan.repeats = 3;
        let s = run_sweep(&plan, dir.path(), |_| {}).unwrap();
        assert_eq!(s.written, 6);
        let rows = read_dataset(&dir.path().join(DATASET_FILE_NAME)).unwrap();
        let seeds: HashSet<u64> = rows.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 3);
    }

    #[test]
    fn shape_failures_are_counted_and_sweep_continues() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan(2);
        plan.configs.push(ModelConfig {
            arch: ModelArch::cnn(&[ConvLayerSpec::new(2, 7, true)]),
            ..plan.configs[0].clone()
        });
        let s = run_sweep(&plan, dir.path(), |_| {}).unwrap();
        assert_eq!(s.written, 2);
        assert_eq!(s.failures.len(), 1);
    }

    #[test]
    fn csv_header_and_compact_columns() {
        let dir = tempfile::tempdir().unwrap();
        run_sweep(&tiny_plan(2), dir.path(), |_| {}).unwrap();
        let text = fs::read_to_string(dir.path().join(DATASET_FILE_NAME)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        let first = lines.next().unwrap();
        assert!(first.starts_with("MLP,[],[8],1,Adam,0.01,16,64,6,6,1,3,"), "{first}");
        let second = lines.next().unwrap();
        assert!(second.starts_with("CNN,[3k3p],[],2,SGD,"), "{second}");
    }

    #[test]
    fn grid_subsample_is_seeded_and_distinct() {
        let plan = SweepPlan::grid_subsample(300, DatasetSpec::mnist_like(1000, 0), 42);
        let a = plan.resolved_configs().unwrap();
        assert_eq!(a, plan.resolved_configs().unwrap());
        assert_eq!(a.len(), 300);
        let keys: HashSet<String> = a.iter().map(ModelConfig::key).collect();
        assert_eq!(keys.len(), 300);
        let other = SweepPlan::grid_subsample(300, DatasetSpec::mnist_like(1000, 0), 43);
        assert_ne!(a, other.resolved_configs().unwrap());
    }

    #[test]
    fn plan_json_defaults() {
        let plan: SweepPlan = serde_json::from_str(
            r#"{"grid_sample": 5, "data": {"num_samples": 100, "input_height": 28,
                "input_width": 28, "input_channels": 1, "num_classes": 10, "seed": 1}}"#,
        )
        .unwrap();
        assert_eq!(plan.repeats, 1);
        assert_eq!(plan.warmup_runs, 2);
        assert_eq!(plan.resolved_configs().unwrap().len(), 5);
        let bad: SweepPlan = serde_json::from_str(
            r#"{"repeats": 0, "data": {"num_samples": 100, "input_height": 28,
                "input_width": 28, "input_channels": 1, "num_classes": 10, "seed": 1}}"#,
        )
        .unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn timing_dispersion_of_identical_times_is_zero() {
        let data = tinynn::synthesize(&tiny_data()).unwrap();
        let cfg = &tiny_configs(1)[0];
        let mut s = run_one(cfg, &data, &HardwareDescriptor::reference(), 0, 0).unwrap();
        let mut rows = vec![s.clone()];
        s.repeat_index = 1;
        rows.push(s);
        let d = timing_dispersion(&rows);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].1, 0.0);
    }
}
