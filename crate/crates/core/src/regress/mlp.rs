use serde::{Deserialize, Serialize};

use super::{nrmse_with_range, RegressError};
use crate::tinynn::{train_epochs, NnError, Network, Targets};
use crate::workload::Optimizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpTrainConfig {
    pub hidden: Vec<usize>,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 50],
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            epochs: 300,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Single-output MLP with squared-error loss, trained on scaled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpRegressor {
    pub widths: Vec<usize>,
    pub param_count: usize,
    /// Validation nRMSE after each epoch, in scaled target units.
    pub trace: Vec<f64>,
    pub network: Network,
}

impl MlpRegressor {
    pub fn from_network(widths: Vec<usize>, network: Network) -> Self {
        Self {
            widths,
            param_count: network.param_count(),
            trace: Vec::new(),
            network,
        }
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.network.forward(x, 1)[0]
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        if rows.is_empty() {
            return Vec::new();
        }
        self.network.predict(&rows.concat())
    }
}

/// Trains an MLP regressor. When `validation` is `None` the trace is taken
/// on the training rows. Divergence fails the fit.
pub fn fit_mlp_regressor(
    x: &[Vec<f64>],
    y: &[f64],
    validation: Option<(&[Vec<f64>], &[f64])>,
    cfg: &MlpTrainConfig,
) -> Result<MlpRegressor, RegressError> {
    if x.len() != y.len() {
        return Err(RegressError::LengthMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(RegressError::Empty);
    }
    let width = x[0].len();
    let mut network = Network::mlp(width, &cfg.hidden, 1, cfg.seed);
    let mut opt = network.optimizer(cfg.optimizer, cfg.learning_rate);
    let flat = x.concat();
    let (vx, vy) = validation.unwrap_or((x, y));
    let vflat = vx.concat();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.clamp(1, y.len());
    let targets = Targets::Values { data: y, width: 1 };
    let result = train_epochs(&mut network, &mut opt, &flat, targets, batch, cfg.epochs, |net, _| {
        let pred = net.predict(&vflat);
        trace.push(nrmse_with_range(&pred, vy, 1.0).unwrap_or(f64::NAN));
    });
    match result {
        Ok(_) => {}
        Err(e @ NnError::Diverged { .. }) => return Err(RegressError::Diverged(e)),
        Err(e) => return Err(e.into()),
    }
    let mut reg = MlpRegressor::from_network(cfg.hidden.clone(), network);
    reg.trace = trace;
    Ok(reg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_identity_on_unit_interval() {
        let x: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64 / 63.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0]).collect();
        let cfg = MlpTrainConfig {
            hidden: vec![8],
            epochs: 500,
            batch_size: 16,
            ..Default::default()
        };
        let m = fit_mlp_regressor(&x, &y, None, &cfg).unwrap();
        let err = nrmse_with_range(&m.predict(&x), &y, 1.0).unwrap();
        assert!(err <= 0.05, "{err}");
        assert_eq!(m.trace.len(), 500);
        assert_eq!(*m.trace.last().unwrap(), err);
    }

    #[test]
    fn largest_ladder_param_count() {
        let x = vec![vec![0.0; 21]; 2];
        let cfg = MlpTrainConfig {
            hidden: vec![200, 150, 100, 50],
            epochs: 0,
            ..Default::default()
        };
        let m = fit_mlp_regressor(&x, &[0.0, 1.0], None, &cfg).unwrap();
        let oracle = (21 * 200 + 200) + (200 * 150 + 150) + (150 * 100 + 100) + (100 * 50 + 50) + (50 + 1);
        assert_eq!(m.param_count, oracle);
    }

    #[test]
    fn zero_epochs_is_the_initial_network() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0, 1.0]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let cfg = MlpTrainConfig {
            hidden: vec![4],
            epochs: 0,
            seed: 3,
            ..Default::default()
        };
        let m = fit_mlp_regressor(&x, &y, None, &cfg).unwrap();
        assert_eq!(m.network, Network::mlp(2, &[4], 1, 3));
        assert!(m.trace.is_empty());
        assert!(nrmse_with_range(&m.predict(&x), &y, 1.0).unwrap().is_finite());
    }

    #[test]
    fn divergence_is_a_failed_fit() {
        let x: Vec<Vec<f64>> = (0..32).map(|i| vec![i as f64, 1.0]).collect();
        let y: Vec<f64> = (0..32).map(|i| i as f64 * 100.0).collect();
        let cfg = MlpTrainConfig {
            hidden: vec![16],
            optimizer: Optimizer::Sgd,
            learning_rate: 10.0,
            epochs: 20,
            ..Default::default()
        };
        assert!(matches!(fit_mlp_regressor(&x, &y, None, &cfg), Err(RegressError::Diverged(_))));
    }
}
