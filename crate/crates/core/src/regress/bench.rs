//! Model fitting on profiling samples and the MLP-versus-ensemble benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    fit_gbdt, fit_mlp_regressor, nrmse_with_range, train_test_split, usable_samples, Design, GbdtParams, MlpTrainConfig,
    ModelFile, Predictor, RegressError, Target,
};
use crate::profiler::ProfileSample;
use crate::workload::table1_mlp_variants;

/// Which predictor to fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Gbdt(GbdtParams),
    Mlp(MlpTrainConfig),
}

/// Fits one target on `train` and packages it as a model file.
pub fn fit_model(train: &[ProfileSample], target: Target, spec: &ModelSpec) -> Result<ModelFile, RegressError> {
    let first = train.first().ok_or(RegressError::InsufficientRows { needed: 2, found: 0 })?;
    let design = Design::fit(train, target)?;
    let predictor = match spec {
        ModelSpec::Gbdt(p) => Predictor::Gbdt(fit_gbdt(&design.x, &design.y, p)?),
        ModelSpec::Mlp(cfg) => Predictor::Mlp(fit_mlp_regressor(&design.x, &design.y, None, cfg)?),
    };
    Ok(ModelFile::new(
        target,
        "centralized",
        design.stats,
        first.hardware.clone(),
        predictor,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Mlp,
    Gbdt,
}

impl ModelFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::Mlp => "mlp",
            ModelFamily::Gbdt => "gbdt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub split_seed: u64,
    pub train_fraction: f64,
    pub include_diverged: bool,
    pub min_rows: usize,
    pub mlp_ladder: Vec<Vec<usize>>,
    /// Training settings shared by the ladder; `hidden` is ignored.
    pub mlp: MlpTrainConfig,
    pub depths: Vec<usize>,
    pub subsamples: Vec<f64>,
    pub rounds: usize,
    pub shrinkage: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            split_seed: 0,
            train_fraction: 0.8,
            include_diverged: false,
            min_rows: 100,
            mlp_ladder: table1_mlp_variants().into_iter().map(|a| a.mlp_hidden).collect(),
            mlp: MlpTrainConfig::default(),
            depths: vec![3, 6, 9, 12],
            subsamples: vec![0.5, 0.8, 1.0],
            rounds: 300,
            shrinkage: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub family: ModelFamily,
    /// Hidden widths for MLPs, `d<depth>_s<subsample>` for ensembles.
    pub capacity: String,
    /// Trainable parameters (MLP) or total leaves (ensemble).
    pub params: usize,
    pub max_depth: Option<usize>,
    pub subsample: Option<f64>,
    pub target: Target,
    pub train_nrmse: f64,
    pub test_nrmse: f64,
    pub train_seconds: f64,
    /// Set when the fit failed; error columns are then NaN.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub target: Target,
    pub capacity: String,
    pub params: usize,
    pub test_nrmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub train_rows: usize,
    pub test_rows: usize,
    pub excluded_diverged: usize,
    pub entries: Vec<BenchEntry>,
    pub convergence: Vec<ConvergenceTrace>,
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn hidden_string(h: &[usize]) -> String {
    let parts: Vec<String> = h.iter().map(usize::to_string).collect();
    format!("[{}]", parts.join(";"))
}

impl BenchmarkReport {
    pub fn best(&self, family: ModelFamily, target: Target) -> Option<&BenchEntry> {
        self.entries
            .iter()
            .filter(|e| e.family == family && e.target == target && e.failure.is_none())
            .min_by(|a, b| a.test_nrmse.total_cmp(&b.test_nrmse))
    }

    pub fn ensemble(&self, target: Target, depth: usize, subsample: f64) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| {
            e.family == ModelFamily::Gbdt && e.target == target && e.max_depth == Some(depth) && e.subsample == Some(subsample)
        })
    }

    pub fn mlp(&self, target: Target, hidden: &[usize]) -> Option<&BenchEntry> {
        let cap = hidden_string(hidden);
        self.entries
            .iter()
            .find(|e| e.family == ModelFamily::Mlp && e.target == target && e.capacity == cap)
    }

    /// nRMSE table without timing, so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,capacity,params,max_depth,subsample,target,train_nrmse,test_nrmse\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                e.family.as_str(),
                e.capacity,
                e.params,
                fmt_opt(e.max_depth),
                fmt_opt(e.subsample),
                e.target,
                e.train_nrmse,
                e.test_nrmse
            );
        }
        s
    }

    pub fn convergence_csv(&self) -> String {
        let mut s = String::from("target,capacity,params,epoch,test_nrmse\n");
        for t in &self.convergence {
            for (i, v) in t.test_nrmse.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{},{}", t.target, t.capacity, t.params, i + 1, v);
            }
        }
        s
    }

    /// Plot-ready MLP capacity versus test nRMSE.
    pub fn capacity_csv(&self) -> String {
        let mut s = String::from("target,capacity,params,test_nrmse\n");
        for e in self.entries.iter().filter(|e| e.family == ModelFamily::Mlp) {
            let _ = writeln!(s, "{},{},{},{}", e.target, e.capacity, e.params, e.test_nrmse);
        }
        s
    }

    /// Plot-ready ensemble depth x subsample versus nRMSE.
    pub fn depth_subsample_csv(&self) -> String {
        let mut s = String::from("target,max_depth,subsample,train_nrmse,test_nrmse\n");
        for e in self.entries.iter().filter(|e| e.family == ModelFamily::Gbdt) {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                e.target,
                fmt_opt(e.max_depth),
                fmt_opt(e.subsample),
                e.train_nrmse,
                e.test_nrmse
            );
        }
        s
    }

    /// Per-target best of each family plus the mean across targets.
    pub fn summary_table(&self) -> String {
        let mut s = String::from("target,best_mlp,best_mlp_nrmse,best_gbdt,best_gbdt_nrmse,ratio\n");
        let mut sums = (0.0, 0.0);
        for t in Target::ALL {
            let (m, g) = (self.best(ModelFamily::Mlp, t), self.best(ModelFamily::Gbdt, t));
            let mv = m.map_or(f64::NAN, |e| e.test_nrmse);
            let gv = g.map_or(f64::NAN, |e| e.test_nrmse);
            sums.0 += mv;
            sums.1 += gv;
            let _ = writeln!(
                s,
                "{t},{},{mv},{},{gv},{}",
                m.map_or("", |e| &e.capacity),
                g.map_or("", |e| &e.capacity),
                gv / mv
            );
        }
        let n = Target::ALL.len() as f64;
        let _ = writeln!(s, "mean,,{},,{},{}", sums.0 / n, sums.1 / n, sums.1 / sums.0);
        s
    }
}

/// Fits the MLP ladder and the depth x subsample ensemble grid on every
/// target over a seeded train/test split.
pub fn benchmark(samples: &[ProfileSample], cfg: &BenchmarkConfig) -> Result<BenchmarkReport, RegressError> {
    let usable = usable_samples(samples, cfg.include_diverged);
    if usable.len() < cfg.min_rows.max(2) {
        return Err(RegressError::InsufficientRows {
            needed: cfg.min_rows.max(2),
            found: usable.len(),
        });
    }
    let (tr, te) = train_test_split(usable.len(), cfg.train_fraction, cfg.split_seed);
    let train: Vec<ProfileSample> = tr.iter().map(|&i| usable[i].clone()).collect();
    let test: Vec<ProfileSample> = te.iter().map(|&i| usable[i].clone()).collect();
    let mut entries = Vec::new();
    let mut convergence = Vec::new();

    for target in Target::ALL {
        let dtrain = Design::fit(&train, target)?;
        let dtest = dtrain.apply(&test, target);
        let range = dtrain.stats.target_range();
        let score = |pred_scaled: &[f64], d: &Design| -> f64 {
            let raw: Vec<f64> = pred_scaled.iter().map(|&z| d.stats.unscale_target(z)).collect();
            nrmse_with_range(&raw, &d.y_raw, range).unwrap_or(f64::NAN)
        };

        for hidden in &cfg.mlp_ladder {
            let mcfg = MlpTrainConfig {
                hidden: hidden.clone(),
                ..cfg.mlp.clone()
            };
            let start = Instant::now();
            let fit = fit_mlp_regressor(&dtrain.x, &dtrain.y, Some((&dtest.x, &dtest.y)), &mcfg);
            let secs = start.elapsed().as_secs_f64();
            let capacity = hidden_string(hidden);
            match fit {
                Ok(m) => {
                    entries.push(BenchEntry {
                        family: ModelFamily::Mlp,
                        capacity: capacity.clone(),
                        params: m.param_count,
                        max_depth: None,
                        subsample: None,
                        target,
                        train_nrmse: score(&m.predict(&dtrain.x), &dtrain),
                        test_nrmse: score(&m.predict(&dtest.x), &dtest),
                        train_seconds: secs,
                        failure: None,
                    });
                    convergence.push(ConvergenceTrace {
                        target,
                        capacity,
                        params: m.param_count,
                        test_nrmse: m.trace,
                    });
                }
                Err(e) => entries.push(BenchEntry {
                    family: ModelFamily::Mlp,
                    capacity,
                    params: 0,
                    max_depth: None,
                    subsample: None,
                    target,
                    train_nrmse: f64::NAN,
                    test_nrmse: f64::NAN,
                    train_seconds: secs,
                    failure: Some(e.to_string()),
                }),
            }
        }

        for &depth in &cfg.depths {
            for &subsample in &cfg.subsamples {
                let params = GbdtParams {
                    max_depth: depth,
                    subsample,
                    rounds: cfg.rounds,
                    shrinkage: cfg.shrinkage,
                    seed: cfg.split_seed,
                };
                let start = Instant::now();
                let e = fit_gbdt(&dtrain.x, &dtrain.y, &params)?;
                let secs = start.elapsed().as_secs_f64();
                let ptrain: Vec<f64> = dtrain.x.iter().map(|x| e.predict(x)).collect();
                let ptest: Vec<f64> = dtest.x.iter().map(|x| e.predict(x)).collect();
                entries.push(BenchEntry {
                    family: ModelFamily::Gbdt,
                    capacity: format!("d{depth}_s{subsample}"),
                    params: e.leaf_count(),
                    max_depth: Some(depth),
                    subsample: Some(subsample),
                    target,
                    train_nrmse: score(&ptrain, &dtrain),
                    test_nrmse: score(&ptest, &dtest),
                    train_seconds: secs,
                    failure: None,
                });
            }
        }
    }

    Ok(BenchmarkReport {
        config: cfg.clone(),
        train_rows: train.len(),
        test_rows: test.len(),
        excluded_diverged: samples.len() - usable.len(),
        entries,
        convergence,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::workload::{ModelArch, Optimizer, TABLE1_EPOCHS};

    fn synthetic_rows() -> Vec<ProfileSample> {
        let mut rows = Vec::new();
        let archs = [ModelArch::mlp(&[100, 50]), ModelArch::mlp(&[150, 100, 50]), cnn1()];
        for (a, arch) in archs.iter().enumerate() {
            for &epochs in &TABLE1_EPOCHS {
                for (o, &opt) in Optimizer::ALL.iter().enumerate() {
                    let t = 0.01 * (a as f64 + 1.0) * epochs as f64 * (1.0 + 0.05 * o as f64);
                    let mut s = sample(arch.clone(), opt, epochs, t);
                    s.diverged = a == 0 && o == 3 && epochs == 20;
                    rows.push(s);
                }
            }
        }
        rows
    }

    fn small_config() -> BenchmarkConfig {
        BenchmarkConfig {
            min_rows: 10,
            mlp: MlpTrainConfig {
                epochs: 20,
                ..Default::default()
            },
            rounds: 50,
            ..Default::default()
        }
    }

    #[test]
    fn report_has_45_entries_and_is_deterministic() {
        let rows = synthetic_rows();
        let a = benchmark(&rows, &small_config()).unwrap();
        assert_eq!(a.entries.len(), 45);
        assert_eq!(a.convergence.len(), 9);
        assert_eq!(a.excluded_diverged, 1);
        assert_eq!(a.train_rows + a.test_rows, 47);
        let b = benchmark(&rows, &small_config()).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_csv().lines().count(), 46);
        assert!(a.convergence.iter().all(|c| c.test_nrmse.len() == 20));
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let rows = synthetic_rows();
        let cfg = BenchmarkConfig::default();
        assert!(matches!(benchmark(&rows, &cfg), Err(RegressError::InsufficientRows { needed: 100, found: 47 })));
    }

    #[test]
    fn ensembles_recover_deterministic_targets() {
        let r = benchmark(&synthetic_rows(), &small_config()).unwrap();
        let best = r.best(ModelFamily::Gbdt, Target::Macs).unwrap();
        assert!(best.train_nrmse < 1e-2, "{best:?}");
    }

    #[test]
    fn fitted_model_round_trips_through_json() {
        let rows = synthetic_rows();
        let m = fit_model(&rows, Target::Flops, &ModelSpec::Gbdt(GbdtParams { rounds: 20, ..Default::default() })).unwrap();
        let back = ModelFile::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.provenance, "centralized");
        let mut bad = m.clone();
        bad.schema_version = 99;
        assert!(ModelFile::from_json(&bad.to_json()).is_err());
    }
}
