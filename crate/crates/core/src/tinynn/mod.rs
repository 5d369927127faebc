//! A small dense/convolutional training engine in `f64`.
//!
//! Networks are plain layer lists with explicit forward and backward kernels.
//! Hidden layers use ReLU, weights are He-uniform, biases start at zero, and
//! every source of randomness is derived from the network seed so training is
//! bit-reproducible on a single thread.

mod layers;
mod optim;

pub use layers::{Layer, Tensor};
pub use optim::{OptimizerState, ADAM_BETA1, ADAM_BETA2, EPSILON, RMSPROP_RHO};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::{conv_block_output, DatasetSpec, Family, ModelArch, WorkloadError};
use layers::ConvGeom;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: u64, step: usize, loss: f64 },
    #[error("batch size {batch_size} invalid for {samples} samples")]
    InvalidBatch { batch_size: usize, samples: usize },
    #[error("input length {got} does not match network input {expected}")]
    InputShape { expected: usize, got: usize },
}

/// Training targets for a batch-major input matrix.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Class indices, softmax cross-entropy loss.
    Classes(&'a [usize]),
    /// Row-major `samples x width` regression targets, mean squared error.
    Values { data: &'a [f64], width: usize },
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Classes(l) => l.len(),
            Targets::Values { data, width } => data.len() / width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_len: usize,
    pub output_len: usize,
    pub rng_seed: u64,
    /// Epochs completed so far; also selects each epoch's shuffle.
    pub epochs_trained: u64,
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

fn dense(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Layer {
    Layer::Dense {
        weight: Tensor {
            shape: vec![inputs, outputs],
            data: he_uniform(rng, inputs, inputs * outputs),
        },
        bias: Tensor::zeros(&[outputs]),
    }
}

/// Builds the training network for a workload architecture on a dataset
/// shape. Output layer has one unit per class.
pub fn build_network(arch: &ModelArch, data: &DatasetSpec, seed: u64) -> Result<Network, NnError> {
    arch.validate()?;
    data.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let features = match arch.family {
        Family::Mlp => {
            let mut fan_in = data.input_len();
            for &width in &arch.mlp_hidden {
                layers.push(dense(&mut rng, fan_in, width));
                layers.push(Layer::Relu);
                fan_in = width;
            }
            fan_in
        }
        Family::Cnn => {
            let (mut h, mut w, mut c) = (data.input_height, data.input_width, data.input_channels);
            for spec in &arch.conv_layers {
                let (nh, nw) = conv_block_output(h, w, spec)?;
                let k = spec.kernel_size;
                let fan_in = k * k * c;
                layers.push(Layer::Conv2d {
                    height: h,
                    width: w,
                    weight: Tensor {
                        shape: vec![k, k, c, spec.out_channels],
                        data: he_uniform(&mut rng, fan_in, fan_in * spec.out_channels),
                    },
                    bias: Tensor::zeros(&[spec.out_channels]),
                });
                layers.push(Layer::Relu);
                if spec.pool {
                    layers.push(Layer::MaxPool2 {
                        height: h,
                        width: w,
                        channels: spec.out_channels,
                    });
                }
                h = nh;
                w = nw;
                c = spec.out_channels;
            }
            layers.push(Layer::Flatten);
            h * w * c
        }
    };
    layers.push(dense(&mut rng, features, data.num_classes));
    Ok(Network {
        layers,
        input_len: data.input_len(),
        output_len: data.num_classes,
        rng_seed: seed,
        epochs_trained: 0,
    })
}

impl Network {
    /// Fully connected network with ReLU hidden layers and an identity head.
    pub fn mlp(input_len: usize, hidden: &[usize], outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut fan_in = input_len;
        for &width in hidden {
            layers.push(dense(&mut rng, fan_in, width));
            layers.push(Layer::Relu);
            fan_in = width;
        }
        layers.push(dense(&mut rng, fan_in, outputs));
        Self {
            layers,
            input_len,
            output_len: outputs,
            rng_seed: seed,
            epochs_trained: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Lengths of the parameter buffers in update order (weight then bias,
    /// layer by layer).
    pub fn param_sizes(&self) -> Vec<usize> {
        self.param_buffers().iter().map(|b| b.len()).collect()
    }

    pub fn param_buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } = layer {
                out.push(&weight.data[..]);
                out.push(&bias.data[..]);
            }
        }
        out
    }

    pub fn param_buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } = layer {
                out.push(&mut weight.data[..]);
                out.push(&mut bias.data[..]);
            }
        }
        out
    }

    /// Copies every parameter from `other`, which must have the same layout.
    pub fn copy_params_from(&mut self, other: &Network) {
        for (dst, src) in self.param_buffers_mut().into_iter().zip(other.param_buffers()) {
            dst.copy_from_slice(src);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.param_buffers().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn optimizer(&self, kind: crate::workload::Optimizer, learning_rate: f64) -> OptimizerState {
        OptimizerState::new(kind, learning_rate, &self.param_sizes())
    }

    /// Forward pass keeping every intermediate activation; `acts[i]` is the
    /// input of layer `i` and the last entry is the network output.
    fn forward_cached(&self, x: &[f64], batch: usize) -> (Vec<Vec<f64>>, Vec<Vec<u32>>) {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pool_idx = vec![Vec::new(); self.layers.len()];
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            // ReLU works in place: its backward pass needs only the output,
            // and no parameterized layer needs its own output.
            if matches!(layer, Layer::Relu) {
                let mut buf = std::mem::take(acts.last_mut().expect("non-empty"));
                buf.iter_mut().for_each(|v| *v = v.max(0.0));
                acts.push(buf);
                continue;
            }
            let input = acts.last().expect("non-empty");
            let out = match layer {
                Layer::Dense { weight, bias } => layers::dense_forward(input, batch, weight, bias),
                Layer::Conv2d {
                    height,
                    width,
                    weight,
                    bias,
                } => layers::conv_forward(input, batch, ConvGeom::from_weight(*height, *width, weight), weight, bias),
                Layer::MaxPool2 {
                    height,
                    width,
                    channels,
                } => {
                    let (out, idx) = layers::maxpool_forward(input, batch, *height, *width, *channels);
                    pool_idx[i] = idx;
                    out
                }
                Layer::Flatten => input.clone(),
                Layer::Relu => unreachable!(),
            };
            acts.push(out);
        }
        (acts, pool_idx)
    }

    /// Network outputs for `batch` rows of input.
    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let (mut acts, _) = self.forward_cached(x, batch);
        acts.pop().expect("non-empty")
    }

    /// Predictions for any number of rows, evaluated in chunks.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        const CHUNK: usize = 256;
        let rows = x.len() / self.input_len;
        let mut out = Vec::with_capacity(rows * self.output_len);
        for start in (0..rows).step_by(CHUNK) {
            let n = CHUNK.min(rows - start);
            out.extend(self.forward(&x[start * self.input_len..(start + n) * self.input_len], n));
        }
        out
    }

    /// Mean loss over the batch, number of correct argmax predictions
    /// (classification only) and parameter gradients in buffer order.
    pub fn loss_and_grads(&self, x: &[f64], batch: usize, targets: Targets<'_>) -> (f64, usize, Vec<Vec<f64>>) {
        let (acts, pool_idx) = self.forward_cached(x, batch);
        let output = acts.last().expect("non-empty");
        let (loss, correct, mut grad) = loss_and_output_grad(output, batch, self.output_len, targets);

        let mut grads: Vec<Vec<f64>> = Vec::new();
        let first_param_layer = self.layers.iter().position(|l| l.param_count() > 0).unwrap_or(0);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[i];
            let need_input_grad = i > first_param_layer;
            match layer {
                Layer::Dense { weight, bias } => {
                    let mut dw = vec![0.0; weight.len()];
                    let mut db = vec![0.0; bias.len()];
                    let dx = layers::dense_backward(input, &grad, batch, weight, &mut dw, &mut db, need_input_grad);
                    grads.push(db);
                    grads.push(dw);
                    grad = dx.unwrap_or_default();
                }
                Layer::Conv2d {
                    height,
                    width,
                    weight,
                    bias,
                } => {
                    let mut dw = vec![0.0; weight.len()];
                    let mut db = vec![0.0; bias.len()];
                    let geom = ConvGeom::from_weight(*height, *width, weight);
                    let dx =
                        layers::conv_backward(input, &grad, batch, geom, weight, &mut dw, &mut db, need_input_grad);
                    grads.push(db);
                    grads.push(dw);
                    grad = dx.unwrap_or_default();
                }
                Layer::Relu => {
                    let out = &acts[i + 1];
                    for (g, &o) in grad.iter_mut().zip(out) {
                        if o <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                Layer::MaxPool2 { .. } => {
                    grad = layers::maxpool_backward(&grad, &pool_idx[i], input.len());
                }
                Layer::Flatten => {}
            }
            if !need_input_grad && i <= first_param_layer {
                break;
            }
        }
        grads.reverse();
        (loss, correct, grads)
    }

    /// Mean loss and accuracy (classification) over a full input matrix.
    pub fn evaluate(&self, x: &[f64], targets: Targets<'_>) -> (f64, f64) {
        let rows = targets.len();
        if rows == 0 {
            return (0.0, 0.0);
        }
        let out = self.predict(x);
        let (loss, correct, _) = loss_and_output_grad(&out, rows, self.output_len, targets);
        (loss, correct as f64 / rows as f64)
    }
}

/// Returns `(mean loss, correct, dLoss/dOutput)`.
fn loss_and_output_grad(out: &[f64], batch: usize, width: usize, targets: Targets<'_>) -> (f64, usize, Vec<f64>) {
    match targets {
        Targets::Classes(labels) => {
            let mut grad = vec![0.0; out.len()];
            let mut loss = 0.0;
            let mut correct = 0;
            let inv = 1.0 / batch as f64;
            for (b, (row, g)) in out.chunks_exact(width).zip(grad.chunks_exact_mut(width)).enumerate() {
                let label = labels[b];
                let (mut arg, mut max) = (0, row[0]);
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > max {
                        max = v;
                        arg = j;
                    }
                }
                if arg == label {
                    correct += 1;
                }
                let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                loss += log_z - row[label];
                for (j, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
                    let p = (v - log_z).exp();
                    *gv = (p - if j == label { 1.0 } else { 0.0 }) * inv;
                }
            }
            (loss * inv, correct, grad)
        }
        Targets::Values { data, .. } => {
            let n = out.len() as f64;
            let mut loss = 0.0;
            let grad = out
                .iter()
                .zip(data)
                .map(|(&y, &t)| {
                    let d = y - t;
                    loss += d * d;
                    2.0 * d / n
                })
                .collect();
            (loss / n, 0, grad)
        }
    }
}

/// A batch loss above this multiple of the run's first batch loss (floored at
/// 1.0) counts as divergence, as does any non-finite loss.
pub const DIVERGENCE_LOSS_FACTOR: f64 = 1e4;

/// Summary of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub mean_loss: f64,
    pub accuracy: f64,
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Minibatch training for `epochs` passes over `x`. Each epoch visits the rows
/// in a permutation derived from `(net.rng_seed, net.epochs_trained)`; the last
/// partial batch is kept. `on_epoch` runs after every completed epoch.
///
/// Fails with [`NnError::Diverged`] on a non-finite batch loss or one above
/// [`DIVERGENCE_LOSS_FACTOR`] times the first batch loss of this call.
pub fn train_epochs(
    net: &mut Network,
    opt: &mut OptimizerState,
    x: &[f64],
    targets: Targets<'_>,
    batch_size: usize,
    epochs: usize,
    mut on_epoch: impl FnMut(&Network, EpochStats),
) -> Result<Option<EpochStats>, NnError> {
    let rows = targets.len();
    if x.len() != rows * net.input_len {
        return Err(NnError::InputShape {
            expected: rows * net.input_len,
            got: x.len(),
        });
    }
    if batch_size == 0 || batch_size > rows {
        return Err(NnError::InvalidBatch {
            batch_size,
            samples: rows,
        });
    }
    let in_len = net.input_len;
    let mut last = None;
    let mut xb = Vec::with_capacity(batch_size * in_len);
    let mut lb = Vec::with_capacity(batch_size);
    let mut vb = Vec::new();
    let mut ceiling = f64::INFINITY;
    for _ in 0..epochs {
        let epoch = net.epochs_trained;
        let order = epoch_order(net.rng_seed, epoch, rows);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, chunk) in order.chunks(batch_size).enumerate() {
            xb.clear();
            for &r in chunk {
                xb.extend_from_slice(&x[r * in_len..(r + 1) * in_len]);
            }
            let batch_targets = match targets {
                Targets::Classes(labels) => {
                    lb.clear();
                    lb.extend(chunk.iter().map(|&r| labels[r]));
                    Targets::Classes(&lb)
                }
                Targets::Values { data, width } => {
                    vb.clear();
                    for &r in chunk {
                        vb.extend_from_slice(&data[r * width..(r + 1) * width]);
                    }
                    Targets::Values { data: &vb, width }
                }
            };
            let (loss, ok, grads) = net.loss_and_grads(&xb, chunk.len(), batch_targets);
            if !loss.is_finite() || loss > ceiling {
                return Err(NnError::Diverged { epoch, step, loss });
            }
            if ceiling.is_infinite() {
                ceiling = DIVERGENCE_LOSS_FACTOR * loss.max(1.0);
            }
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
            opt.update(&mut net.param_buffers_mut(), &grads);
        }
        net.epochs_trained += 1;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / rows as f64,
            accuracy: correct as f64 / rows as f64,
        };
        on_epoch(net, stats);
        last = Some(stats);
    }
    Ok(last)
}

/// Materialized synthetic classification data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

/// Seeded, label-balanced synthetic data: each class has a uniform random
/// prototype in `[0, 1]^d`; samples are their class prototype plus Gaussian
/// noise (sigma 0.3). Sample `i` has label `i % num_classes`.
pub fn synthesize(spec: &DatasetSpec) -> Result<Dataset, NnError> {
    spec.validate()?;
    let d = spec.input_len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<f64> = (0..spec.num_classes * d).map(|_| rng.gen::<f64>()).collect();
    let noise = Normal::new(0.0, 0.3).expect("valid sigma");
    let mut inputs = Vec::with_capacity(spec.num_samples * d);
    let mut labels = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let label = i % spec.num_classes;
        let proto = &prototypes[label * d..(label + 1) * d];
        inputs.extend(proto.iter().map(|&p| p + noise.sample(&mut rng)));
        labels.push(label);
    }
    Ok(Dataset {
        spec: spec.clone(),
        inputs,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOutcome {
    pub final_loss: f64,
    pub final_accuracy: f64,
}

/// Trains a classifier on a synthetic dataset. Loss and accuracy are the
/// running values of the last epoch; with zero epochs the untouched network
/// is evaluated instead.
pub fn train(
    net: &mut Network,
    opt: &mut OptimizerState,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
) -> Result<TrainOutcome, NnError> {
    let targets = Targets::Classes(&data.labels);
    match train_epochs(net, opt, &data.inputs, targets, batch_size, epochs, |_, _| {})? {
        Some(stats) => Ok(TrainOutcome {
            final_loss: stats.mean_loss,
            final_accuracy: stats.accuracy,
        }),
        None => {
            let (final_loss, final_accuracy) = net.evaluate(&data.inputs, targets);
            Ok(TrainOutcome {
                final_loss,
                final_accuracy,
            })
        }
    }
}

/// Central step for finite differences.
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Magnitude below which a gradient entry is compared absolutely.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Worst relative error between backprop gradients and central finite
/// differences over a seeded subset of up to `per_buffer` entries of each
/// parameter buffer. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(net: &Network, x: &[f64], targets: Targets<'_>, per_buffer: usize) -> f64 {
    let batch = targets.len();
    let (_, _, analytic) = net.loss_and_grads(x, batch, targets);
    let mut rng = ChaCha8Rng::seed_from_u64(net.rng_seed ^ 0x6772_6164);
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (buf, grad) in analytic.iter().enumerate() {
        let mut picks: Vec<usize> = (0..grad.len()).collect();
        picks.shuffle(&mut rng);
        picks.truncate(per_buffer);
        for j in picks {
            let original = net.param_buffers()[buf][j];
            probe.param_buffers_mut()[buf][j] = original + GRAD_CHECK_STEP;
            let plus = probe.loss_and_grads(x, batch, targets).0;
            probe.param_buffers_mut()[buf][j] = original - GRAD_CHECK_STEP;
            let minus = probe.loss_and_grads(x, batch, targets).0;
            probe.param_buffers_mut()[buf][j] = original;
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let a = grad[j];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
