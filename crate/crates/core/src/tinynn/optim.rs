use serde::{Deserialize, Serialize};

use crate::workload::Optimizer;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const RMSPROP_RHO: f64 = 0.9;
pub const EPSILON: f64 = 1e-8;

/// Per-parameter optimizer state. Accumulator buffers mirror the parameter
/// buffers of the network they were created for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: Optimizer,
    pub learning_rate: f64,
    /// Adam first moment; unused otherwise.
    first: Vec<Vec<f64>>,
    /// Adam/RMSprop second moment, Adagrad squared-gradient sum.
    second: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl OptimizerState {
    /// `sizes` gives the length of each parameter buffer, in network order.
    pub fn new(kind: Optimizer, learning_rate: f64, sizes: &[usize]) -> Self {
        let zeros = |on: bool| -> Vec<Vec<f64>> {
            if on {
                sizes.iter().map(|&n| vec![0.0; n]).collect()
            } else {
                Vec::new()
            }
        };
        Self {
            kind,
            learning_rate,
            first: zeros(kind == Optimizer::Adam),
            second: zeros(kind != Optimizer::Sgd),
            step_count: 0,
        }
    }

    /// Single-parameter state, convenient for checking the update rules.
    pub fn scalar(kind: Optimizer, learning_rate: f64) -> Self {
        Self::new(kind, learning_rate, &[1])
    }

    /// Updates a scalar parameter held by a state built with [`Self::scalar`].
    pub fn optimizer_step(&mut self, param: f64, grad: f64) -> f64 {
        let mut p = [param];
        self.update(&mut [&mut p[..]], &[vec![grad]]);
        p[0]
    }

    /// One update over every parameter buffer. Increments `step_count` once.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        debug_assert_eq!(params.len(), grads.len());
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.iter_mut().zip(g) {
                        *w -= lr * d;
                    }
                }
            }
            Optimizer::Adam => {
                let t = self.step_count as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    for j in 0..p.len() {
                        let d = g[j];
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * d;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * d * d;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        p[j] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
                    }
                }
            }
            Optimizer::RmsProp => {
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let v = &mut self.second[i];
                    for j in 0..p.len() {
                        let d = g[j];
                        v[j] = RMSPROP_RHO * v[j] + (1.0 - RMSPROP_RHO) * d * d;
                        p[j] -= lr * d / (v[j].sqrt() + EPSILON);
                    }
                }
            }
            Optimizer::Adagrad => {
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let acc = &mut self.second[i];
                    for j in 0..p.len() {
                        let d = g[j];
                        acc[j] += d * d;
                        p[j] -= lr * d / (acc[j] + EPSILON).sqrt();
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_first_step() {
        let mut opt = OptimizerState::scalar(Optimizer::Sgd, 0.01);
        assert_eq!(opt.optimizer_step(0.0, 1.0), -0.01);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        let mut opt = OptimizerState::scalar(Optimizer::Adam, 0.01);
        let p = opt.optimizer_step(0.0, 1.0);
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
    }

    #[test]
    fn adagrad_first_step() {
        let mut opt = OptimizerState::scalar(Optimizer::Adagrad, 0.01);
        let p = opt.optimizer_step(0.0, 1.0);
        let expected = -0.01 / (1.0f64 + 1e-8).sqrt();
        assert!((p - expected).abs() < 1e-15);
        assert!((p + 0.01).abs() < 1e-9);
    }

    #[test]
    fn rmsprop_first_step() {
        let mut opt = OptimizerState::scalar(Optimizer::RmsProp, 0.01);
        let p = opt.optimizer_step(0.0, 1.0);
        let expected = -0.01 / (0.1f64.sqrt() + 1e-8);
        assert!((p - expected).abs() < 1e-15);
    }

    #[test]
    fn accumulators_mirror_parameter_shapes() {
        let opt = OptimizerState::new(Optimizer::Adam, 0.1, &[3, 5]);
        assert_eq!(opt.first.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 5]);
        assert_eq!(opt.second.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 5]);
        let sgd = OptimizerState::new(Optimizer::Sgd, 0.1, &[3, 5]);
        assert!(sgd.first.is_empty() && sgd.second.is_empty());
    }

    #[test]
    fn adagrad_steps_shrink() {
        let mut opt = OptimizerState::scalar(Optimizer::Adagrad, 0.1);
        let mut p = 0.0;
        let mut last = f64::INFINITY;
        for _ in 0..5 {
            let next = opt.optimizer_step(p, 1.0);
            let step = (p - next).abs();
            assert!(step < last);
            last = step;
            p = next;
        }
    }
}
