//! Workload configuration space and analytic cost counting.
//!
//! A [`ModelConfig`] is one trainable workload: an architecture from the
//! profiling grid plus its training hyperparameters. [`count_costs`] walks the
//! layer stack of a configuration and returns parameter, MAC and FLOP counts
//! using integer arithmetic only.
//!
//! Counting conventions:
//!
//! * dense MACs are `in * out` per sample, biases excluded;
//! * convolutions are stride 1 with same padding, MACs are
//!   `H * W * C_out * k * k * C_in`;
//! * `pool: true` appends a 2x2 max-pool with stride 2 (floor division);
//! * FLOPs are `2 * MACs`; activations, pooling, softmax and bias adds are free;
//! * a training step costs three forward passes (forward + 2x backward).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Backward pass is costed at twice the forward pass.
pub const TRAINING_FLOP_MULTIPLIER: u64 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("cannot parse {what} from {input:?}")]
    Parse { what: &'static str, input: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "CNN")]
    Cnn,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Mlp => "MLP",
            Family::Cnn => "CNN",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "MLP" | "mlp" => Ok(Family::Mlp),
            "CNN" | "cnn" => Ok(Family::Cnn),
            _ => Err(WorkloadError::Parse {
                what: "family",
                input: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Optimizer {
    Adam,
    #[serde(rename = "SGD")]
    Sgd,
    #[serde(rename = "RMSprop")]
    RmsProp,
    Adagrad,
}

impl Optimizer {
    /// Table order: Adam, SGD, RMSprop, Adagrad.
    pub const ALL: [Optimizer; 4] = [
        Optimizer::Adam,
        Optimizer::Sgd,
        Optimizer::RmsProp,
        Optimizer::Adagrad,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Optimizer::Adam => "Adam",
            Optimizer::Sgd => "SGD",
            Optimizer::RmsProp => "RMSprop",
            Optimizer::Adagrad => "Adagrad",
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Optimizer {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            "rmsprop" => Ok(Optimizer::RmsProp),
            "adagrad" => Ok(Optimizer::Adagrad),
            _ => Err(WorkloadError::Parse {
                what: "optimizer",
                input: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    /// 2x2 max-pool (stride 2) after the activation.
    pub pool: bool,
}

impl ConvLayerSpec {
    pub const fn new(out_channels: usize, kernel_size: usize, pool: bool) -> Self {
        Self {
            out_channels,
            kernel_size,
            pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelArch {
    pub family: Family,
    #[serde(default)]
    pub mlp_hidden: Vec<usize>,
    #[serde(default)]
    pub conv_layers: Vec<ConvLayerSpec>,
}

impl ModelArch {
    pub fn mlp(hidden: &[usize]) -> Self {
        Self {
            family: Family::Mlp,
            mlp_hidden: hidden.to_vec(),
            conv_layers: Vec::new(),
        }
    }

    pub fn cnn(layers: &[ConvLayerSpec]) -> Self {
        Self {
            family: Family::Cnn,
            mlp_hidden: Vec::new(),
            conv_layers: layers.to_vec(),
        }
    }

    /// An MLP may have no hidden layers (a single dense layer); a CNN needs at
    /// least one conv block. The list that does not belong to the family must
    /// be empty.
    pub fn validate(&self) -> Result<(), WorkloadError> {
        match self.family {
            Family::Mlp => {
                if !self.conv_layers.is_empty() {
                    return Err(WorkloadError::InvalidArch(
                        "MLP architecture with conv layers".into(),
                    ));
                }
                if self.mlp_hidden.iter().any(|&w| w == 0) {
                    return Err(WorkloadError::InvalidArch("zero-width hidden layer".into()));
                }
            }
            Family::Cnn => {
                if !self.mlp_hidden.is_empty() {
                    return Err(WorkloadError::InvalidArch(
                        "CNN architecture with MLP hidden widths".into(),
                    ));
                }
                if self.conv_layers.is_empty() {
                    return Err(WorkloadError::InvalidArch("CNN without conv layers".into()));
                }
                for c in &self.conv_layers {
                    if c.out_channels == 0 {
                        return Err(WorkloadError::InvalidArch("zero out_channels".into()));
                    }
                    if c.kernel_size == 0 || c.kernel_size % 2 == 0 {
                        return Err(WorkloadError::InvalidArch(format!(
                            "kernel size {} is not a positive odd number",
                            c.kernel_size
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of hidden dense layers or conv blocks.
    pub fn depth(&self) -> usize {
        match self.family {
            Family::Mlp => self.mlp_hidden.len(),
            Family::Cnn => self.conv_layers.len(),
        }
    }

    /// Sum of hidden widths (MLP) or conv output channels (CNN).
    pub fn hidden_units(&self) -> usize {
        match self.family {
            Family::Mlp => self.mlp_hidden.iter().sum(),
            Family::Cnn => self.conv_layers.iter().map(|c| c.out_channels).sum(),
        }
    }

    /// Compact conv string, e.g. `[32k5p;64k3p]`. Empty list renders as `[]`.
    pub fn conv_spec_string(&self) -> String {
        let parts: Vec<String> = self
            .conv_layers
            .iter()
            .map(|c| format!("{}k{}{}", c.out_channels, c.kernel_size, if c.pool { "p" } else { "" }))
            .collect();
        format!("[{}]", parts.join(";"))
    }

    /// Compact hidden-width string, e.g. `[100;50]`.
    pub fn mlp_hidden_string(&self) -> String {
        let parts: Vec<String> = self.mlp_hidden.iter().map(|w| w.to_string()).collect();
        format!("[{}]", parts.join(";"))
    }

    /// Inverse of the two compact strings.
    pub fn from_compact(family: Family, conv_spec: &str, mlp_hidden: &str) -> Result<Self, WorkloadError> {
        let conv_layers = split_bracketed(conv_spec, "conv_spec")?
            .into_iter()
            .map(parse_conv_token)
            .collect::<Result<Vec<_>, _>>()?;
        let mlp_hidden = split_bracketed(mlp_hidden, "mlp_hidden")?
            .into_iter()
            .map(|t| {
                t.parse::<usize>().map_err(|_| WorkloadError::Parse {
                    what: "hidden width",
                    input: t.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let arch = ModelArch {
            family,
            mlp_hidden,
            conv_layers,
        };
        arch.validate()?;
        Ok(arch)
    }
}

impl fmt::Display for ModelArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            Family::Mlp => write!(f, "MLP{}", self.mlp_hidden_string()),
            Family::Cnn => write!(f, "CNN{}", self.conv_spec_string()),
        }
    }
}

fn split_bracketed<'a>(s: &'a str, what: &'static str) -> Result<Vec<&'a str>, WorkloadError> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| WorkloadError::Parse {
            what,
            input: s.to_string(),
        })?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    Ok(inner.split(';').map(str::trim).collect())
}

fn parse_conv_token(t: &str) -> Result<ConvLayerSpec, WorkloadError> {
    let err = || WorkloadError::Parse {
        what: "conv layer",
        input: t.to_string(),
    };
    let (channels, rest) = t.split_once('k').ok_or_else(err)?;
    let (kernel, pool) = match rest.strip_suffix('p') {
        Some(k) => (k, true),
        None => (rest, false),
    };
    Ok(ConvLayerSpec {
        out_channels: channels.parse().map_err(|_| err())?,
        kernel_size: kernel.parse().map_err(|_| err())?,
        pool,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ModelArch,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl ModelConfig {
    /// Stable textual key; equal configs map to equal keys.
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}",
            self.arch.family,
            self.arch.conv_spec_string(),
            self.arch.mlp_hidden_string(),
            self.epochs,
            self.optimizer,
            self.learning_rate,
            self.batch_size,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_samples: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// 28x28x1 inputs, 10 classes.
    pub fn mnist_like(num_samples: usize, seed: u64) -> Self {
        Self {
            num_samples,
            input_height: 28,
            input_width: 28,
            input_channels: 1,
            num_classes: 10,
            seed,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_height * self.input_width * self.input_channels
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.num_samples == 0 || self.input_len() == 0 {
            return Err(WorkloadError::ShapeMismatch("empty dataset shape".into()));
        }
        if self.num_classes < 2 {
            return Err(WorkloadError::ShapeMismatch("num_classes must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCount {
    pub params: u64,
    pub forward_macs_per_sample: u64,
    pub forward_flops_per_sample: u64,
    pub training_flops_total: u64,
}

/// Spatial dims after a conv block, checking the kernel fits.
pub(crate) fn conv_block_output(
    h: usize,
    w: usize,
    layer: &ConvLayerSpec,
) -> Result<(usize, usize), WorkloadError> {
    if h < layer.kernel_size || w < layer.kernel_size {
        return Err(WorkloadError::ShapeMismatch(format!(
            "{h}x{w} input smaller than {k}x{k} kernel",
            k = layer.kernel_size
        )));
    }
    if !layer.pool {
        return Ok((h, w));
    }
    let (ph, pw) = (h / 2, w / 2);
    if ph == 0 || pw == 0 {
        return Err(WorkloadError::ShapeMismatch(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    Ok((ph, pw))
}

pub fn count_costs(config: &ModelConfig, data: &DatasetSpec) -> Result<CostCount, WorkloadError> {
    let (params, macs) = arch_costs(&config.arch, data)?;
    let flops = 2 * macs;
    Ok(CostCount {
        params,
        forward_macs_per_sample: macs,
        forward_flops_per_sample: flops,
        training_flops_total: TRAINING_FLOP_MULTIPLIER
            * flops
            * data.num_samples as u64
            * config.epochs as u64,
    })
}

/// `(params, forward MACs per sample)` for an architecture on a dataset shape.
pub fn arch_costs(arch: &ModelArch, data: &DatasetSpec) -> Result<(u64, u64), WorkloadError> {
    arch.validate()?;
    data.validate()?;
    let classes = data.num_classes as u64;
    let mut params = 0u64;
    let mut macs = 0u64;
    let features = match arch.family {
        Family::Mlp => {
            let mut fan_in = data.input_len() as u64;
            for &width in &arch.mlp_hidden {
                let width = width as u64;
                params += fan_in * width + width;
                macs += fan_in * width;
                fan_in = width;
            }
            fan_in
        }
        Family::Cnn => {
            let (mut h, mut w, mut c) = (data.input_height, data.input_width, data.input_channels);
            for layer in &arch.conv_layers {
                let (nh, nw) = conv_block_output(h, w, layer)?;
                let k2c = (layer.kernel_size * layer.kernel_size * c) as u64;
                let out = layer.out_channels as u64;
                params += k2c * out + out;
                macs += (h * w) as u64 * out * k2c;
                h = nh;
                w = nw;
                c = layer.out_channels;
            }
            (h * w * c) as u64
        }
    };
    params += features * classes + classes;
    macs += features * classes;
    Ok((params, macs))
}

/// Convolutional variants, in table order.
pub fn table1_cnn_variants() -> Vec<ModelArch> {
    let l1 = ConvLayerSpec::new(32, 5, true);
    let l2 = ConvLayerSpec::new(64, 3, true);
    let l3 = ConvLayerSpec::new(128, 3, true);
    vec![
        ModelArch::cnn(&[l1]),
        ModelArch::cnn(&[l1, l2]),
        ModelArch::cnn(&[l1, l2, l3]),
    ]
}

/// Fully connected variants, in table order.
pub fn table1_mlp_variants() -> Vec<ModelArch> {
    vec![
        ModelArch::mlp(&[100, 50]),
        ModelArch::mlp(&[150, 100, 50]),
        ModelArch::mlp(&[200, 150, 100, 50]),
    ]
}

pub const TABLE1_EPOCHS: [usize; 4] = [5, 10, 15, 20];
pub const TABLE1_LEARNING_RATES: [f64; 6] = [0.01, 0.05, 0.001, 0.005, 0.0001, 0.0005];
pub const TABLE1_BATCH_SIZES: [usize; 4] = [16, 32, 64, 128];

/// Full cross product of the profiling grid: 6 architectures x 4 epoch
/// counts x 4 optimizers x 6 learning rates x 4 batch sizes.
pub fn enumerate_table1_grid() -> Vec<ModelConfig> {
    let archs: Vec<ModelArch> = table1_cnn_variants()
        .into_iter()
        .chain(table1_mlp_variants())
        .collect();
    let mut out = Vec::with_capacity(archs.len() * 4 * 4 * 6 * 4);
    for arch in &archs {
        for &epochs in &TABLE1_EPOCHS {
            for &optimizer in &Optimizer::ALL {
                for &learning_rate in &TABLE1_LEARNING_RATES {
                    for &batch_size in &TABLE1_BATCH_SIZES {
                        out.push(ModelConfig {
                            arch: arch.clone(),
                            epochs,
                            optimizer,
                            learning_rate,
                            batch_size,
                        });
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(arch: ModelArch, epochs: usize) -> ModelConfig {
        ModelConfig {
            arch,
            epochs,
            optimizer: Optimizer::Adam,
            learning_rate: 0.01,
            batch_size: 16,
        }
    }

    #[test]
    fn grid_has_expected_size_and_first_element() {
        let grid = enumerate_table1_grid();
        assert_eq!(grid.len(), 2304);
        let first = &grid[0];
        assert_eq!(first.arch, ModelArch::cnn(&[ConvLayerSpec::new(32, 5, true)]));
        assert_eq!(first.epochs, 5);
        assert_eq!(first.optimizer, Optimizer::Adam);
        assert_eq!(first.learning_rate, 0.01);
        assert_eq!(first.batch_size, 16);
        let last = grid.last().unwrap();
        assert_eq!(last.arch, ModelArch::mlp(&[200, 150, 100, 50]));
        assert_eq!(last.batch_size, 128);
        assert_eq!(last.learning_rate, 0.0005);
    }

    #[test]
    fn grid_has_no_duplicates() {
        let grid = enumerate_table1_grid();
        let keys: std::collections::HashSet<String> = grid.iter().map(ModelConfig::key).collect();
        assert_eq!(keys.len(), grid.len());
    }

    #[test]
    fn mlp_100_50_costs() {
        let data = DatasetSpec::mnist_like(1000, 0);
        let c = count_costs(&cfg(ModelArch::mlp(&[100, 50]), 5), &data).unwrap();
        assert_eq!(c.params, 84_060);
        assert_eq!(c.forward_macs_per_sample, 83_900);
        assert_eq!(c.forward_flops_per_sample, 167_800);
        assert_eq!(c.training_flops_total, 2_517_000_000);
    }

    #[test]
    fn single_block_cnn_costs() {
        let data = DatasetSpec::mnist_like(1000, 0);
        let arch = ModelArch::cnn(&[ConvLayerSpec::new(32, 5, true)]);
        let c = count_costs(&cfg(arch, 5), &data).unwrap();
        assert_eq!(c.params, 63_562);
        assert_eq!(c.forward_macs_per_sample, 689_920);
    }

    #[test]
    fn empty_hidden_list_is_single_dense_layer() {
        let data = DatasetSpec::mnist_like(10, 0);
        let c = count_costs(&cfg(ModelArch::mlp(&[]), 1), &data).unwrap();
        assert_eq!(c.params, 7_850);
        assert_eq!(c.forward_macs_per_sample, 7_840);
    }

    #[test]
    fn tiny_input_is_shape_mismatch() {
        let mut data = DatasetSpec::mnist_like(10, 0);
        data.input_height = 4;
        data.input_width = 4;
        let arch = table1_cnn_variants().pop().unwrap();
        let err = count_costs(&cfg(arch, 1), &data).unwrap_err();
        assert!(matches!(err, WorkloadError::ShapeMismatch(_)));
    }

    #[test]
    fn pooling_to_zero_is_shape_mismatch() {
        let mut data = DatasetSpec::mnist_like(10, 0);
        data.input_height = 3;
        data.input_width = 3;
        let arch = ModelArch::cnn(&[ConvLayerSpec::new(4, 3, true), ConvLayerSpec::new(4, 1, true)]);
        assert!(count_costs(&cfg(arch, 1), &data).is_err());
    }

    #[test]
    fn invalid_archs_rejected() {
        let mut a = ModelArch::mlp(&[10]);
        a.conv_layers.push(ConvLayerSpec::new(2, 3, false));
        assert!(a.validate().is_err());
        assert!(ModelArch::cnn(&[]).validate().is_err());
        assert!(ModelArch::cnn(&[ConvLayerSpec::new(2, 4, false)]).validate().is_err());
    }

    #[test]
    fn compact_strings_round_trip() {
        for arch in table1_cnn_variants().into_iter().chain(table1_mlp_variants()) {
            let back =
                ModelArch::from_compact(arch.family, &arch.conv_spec_string(), &arch.mlp_hidden_string())
                    .unwrap();
            assert_eq!(back, arch);
        }
        assert_eq!(table1_cnn_variants()[1].conv_spec_string(), "[32k5p;64k3p]");
        assert_eq!(ModelArch::mlp(&[100, 50]).mlp_hidden_string(), "[100;50]");
        assert_eq!(
            ModelArch::from_compact(Family::Cnn, "[8k3]", "[]").unwrap().conv_layers[0],
            ConvLayerSpec::new(8, 3, false)
        );
    }

    #[test]
    fn config_json_uses_snake_case_fields() {
        let c = enumerate_table1_grid().remove(0);
        let v: serde_json::Value = serde_json::to_value(&c).unwrap();
        assert_eq!(v["arch"]["family"], "CNN");
        assert_eq!(v["arch"]["conv_layers"][0]["out_channels"], 32);
        assert_eq!(v["optimizer"], "Adam");
        assert_eq!(v["batch_size"], 16);
        let back: ModelConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
        let d = DatasetSpec::mnist_like(5, 3);
        let dv = serde_json::to_value(&d).unwrap();
        assert_eq!(dv["input_height"], 28);
        assert_eq!(dv["num_classes"], 10);
    }
}
