//! Squared-error gradient boosting over exact greedy regression trees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mean, RegressError};

/// Relative gain tolerance: candidates within `SPLIT_TIE_TOLERANCE` times the
/// node's residual sum of squares of the best gain count as tied, and a split
/// must gain more than that to be taken.
pub const SPLIT_TIE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Child {
    Node(usize),
    Leaf(usize),
}

/// Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitNode {
    pub feature: usize,
    pub threshold: f64,
    pub left: Child,
    pub right: Child,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<SplitNode>,
    pub leaves: Vec<f64>,
    pub max_depth: usize,
}

impl RegressionTree {
    pub fn root(&self) -> Child {
        if self.nodes.is_empty() {
            Child::Leaf(0)
        } else {
            Child::Node(0)
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = self.root();
        loop {
            match at {
                Child::Leaf(i) => return self.leaves[i],
                Child::Node(i) => {
                    let n = &self.nodes[i];
                    at = if x[n.feature] <= n.threshold { n.left } else { n.right };
                }
            }
        }
    }

    /// Longest root-to-leaf path, in edges.
    pub fn depth(&self) -> usize {
        fn walk(t: &RegressionTree, c: Child) -> usize {
            match c {
                Child::Leaf(_) => 0,
                Child::Node(i) => 1 + walk(t, t.nodes[i].left).max(walk(t, t.nodes[i].right)),
            }
        }
        walk(self, self.root())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    /// Reduction in residual sum of squares.
    pub gain: f64,
}

/// Best split of `rows` given per-feature row lists sorted by value.
fn scan(cols: &[Vec<f64>], residual: &[f64], sorted: &[Vec<usize>]) -> Option<Split> {
    let rows = sorted.first()?;
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let mu = rows.iter().map(|&r| residual[r]).sum::<f64>() / n as f64;
    let sse: f64 = rows.iter().map(|&r| (residual[r] - mu).powi(2)).sum();
    if sse <= 0.0 {
        return None;
    }
    let mut candidates = Vec::new();
    for (f, list) in sorted.iter().enumerate() {
        let col = &cols[f];
        let mut left_sum = 0.0;
        for i in 0..n - 1 {
            left_sum += residual[list[i]] - mu;
            let (v, next) = (col[list[i]], col[list[i + 1]]);
            if next > v {
                let nl = (i + 1) as f64;
                let nr = (n - i - 1) as f64;
                let gain = left_sum * left_sum * (n as f64) / (nl * nr);
                candidates.push(Split {
                    feature: f,
                    threshold: midpoint(v, next),
                    gain,
                });
            }
        }
    }
    let best = candidates.iter().map(|c| c.gain).fold(f64::NEG_INFINITY, f64::max);
    let tol = SPLIT_TIE_TOLERANCE * sse;
    if !(best > tol) {
        return None;
    }
    candidates.into_iter().find(|c| c.gain >= best - tol)
}

/// Midpoint that still separates `lo` from `hi` under `x <= t`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m < hi {
        m
    } else {
        lo
    }
}

fn column_major(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let width = x.first().map_or(0, Vec::len);
    (0..width).map(|j| x.iter().map(|r| r[j]).collect()).collect()
}

fn presort(cols: &[Vec<f64>], rows: &[usize]) -> Vec<Vec<usize>> {
    cols.iter()
        .map(|col| {
            let mut l = rows.to_vec();
            l.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            l
        })
        .collect()
}

/// Greedy split of `rows` (indices into `x`) for the given residuals: the
/// pair maximizing the reduction in squared error over every feature and
/// every midpoint between consecutive distinct values. Near-ties resolve to
/// the lowest feature, then the lowest threshold. `None` when no split helps.
pub fn best_split(x: &[Vec<f64>], residual: &[f64], rows: &[usize]) -> Option<Split> {
    let cols = column_major(x);
    scan(&cols, residual, &presort(&cols, rows))
}

struct Grower<'a> {
    cols: &'a [Vec<f64>],
    residual: &'a [f64],
    max_depth: usize,
    tree: RegressionTree,
    goes_left: Vec<bool>,
}

impl Grower<'_> {
    fn grow(&mut self, sorted: Vec<Vec<usize>>, rows: &[usize], depth: usize) -> Child {
        let split = if depth < self.max_depth {
            scan(self.cols, self.residual, &sorted)
        } else {
            None
        };
        let Some(split) = split else {
            let values: Vec<f64> = rows.iter().map(|&r| self.residual[r]).collect();
            self.tree.leaves.push(mean(&values));
            return Child::Leaf(self.tree.leaves.len() - 1);
        };
        let col = &self.cols[split.feature];
        for &r in rows {
            self.goes_left[r] = col[r] <= split.threshold;
        }
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| self.goes_left[r]);
        let (mut left_sorted, mut right_sorted) = (Vec::with_capacity(sorted.len()), Vec::with_capacity(sorted.len()));
        for list in sorted {
            let (l, r): (Vec<usize>, Vec<usize>) = list.into_iter().partition(|&r| self.goes_left[r]);
            left_sorted.push(l);
            right_sorted.push(r);
        }
        let id = self.tree.nodes.len();
        self.tree.nodes.push(SplitNode {
            feature: split.feature,
            threshold: split.threshold,
            left: Child::Leaf(usize::MAX),
            right: Child::Leaf(usize::MAX),
        });
        let left = self.grow(left_sorted, &left_rows, depth + 1);
        let right = self.grow(right_sorted, &right_rows, depth + 1);
        self.tree.nodes[id].left = left;
        self.tree.nodes[id].right = right;
        Child::Node(id)
    }
}

fn fit_tree(cols: &[Vec<f64>], residual: &[f64], sorted: Vec<Vec<usize>>, rows: &[usize], max_depth: usize) -> RegressionTree {
    let mut g = Grower {
        cols,
        residual,
        max_depth,
        tree: RegressionTree {
            nodes: Vec::new(),
            leaves: Vec::new(),
            max_depth,
        },
        goes_left: vec![false; residual.len()],
    };
    if sorted.is_empty() {
        let values: Vec<f64> = rows.iter().map(|&r| residual[r]).collect();
        g.tree.leaves.push(mean(&values));
    } else {
        g.grow(sorted, rows, 0);
    }
    g.tree
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub max_depth: usize,
    pub subsample: f64,
    pub rounds: usize,
    pub shrinkage: f64,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            max_depth: 6,
            subsample: 1.0,
            rounds: 300,
            shrinkage: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBoostedEnsemble {
    pub base_prediction: f64,
    pub shrinkage: f64,
    pub max_depth: usize,
    pub subsample: f64,
    pub rounds: usize,
    pub seed: u64,
    pub trees: Vec<RegressionTree>,
}

impl GradientBoostedEnsemble {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base_prediction + self.shrinkage * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    /// Predictions after 0, 1, ..., `rounds` trees, accumulated in fitting order.
    pub fn staged_predict(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = self.base_prediction;
        let mut out = vec![acc];
        for t in &self.trees {
            acc += self.shrinkage * t.predict(x);
            out.push(acc);
        }
        out
    }

    pub fn leaf_count(&self) -> usize {
        self.trees.iter().map(|t| t.leaves.len()).sum()
    }
}

/// Fits a boosted ensemble to `y`. Each round fits one tree to the current
/// residuals over a seeded subsample of `round(subsample * n)` rows drawn
/// without replacement.
pub fn fit_gbdt(x: &[Vec<f64>], y: &[f64], params: &GbdtParams) -> Result<GradientBoostedEnsemble, RegressError> {
    if x.len() != y.len() {
        return Err(RegressError::LengthMismatch(x.len(), y.len()));
    }
    if y.len() < 2 {
        return Err(RegressError::InsufficientRows {
            needed: 2,
            found: y.len(),
        });
    }
    if !(params.subsample > 0.0 && params.subsample <= 1.0) {
        return Err(RegressError::Param(format!("subsample {} not in (0, 1]", params.subsample)));
    }
    if !(params.shrinkage > 0.0 && params.shrinkage <= 1.0) {
        return Err(RegressError::Param(format!("shrinkage {} not in (0, 1]", params.shrinkage)));
    }
    let width = x[0].len();
    if x.iter().any(|r| r.len() != width) {
        return Err(RegressError::Param("ragged feature rows".into()));
    }
    let n = y.len();
    let cols = column_major(x);
    let all: Vec<usize> = (0..n).collect();
    let full_sorted = presort(&cols, &all);
    let base_prediction = mean(y);
    let mut fitted = vec![base_prediction; n];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let draw = ((params.subsample * n as f64).round() as usize).clamp(1, n);
    let mut member = vec![false; n];
    let mut trees = Vec::with_capacity(params.rounds);
    for _ in 0..params.rounds {
        let residual: Vec<f64> = y.iter().zip(&fitted).map(|(t, f)| t - f).collect();
        let (rows, sorted) = if draw == n {
            (all.clone(), full_sorted.clone())
        } else {
            let mut rows = rand::seq::index::sample(&mut rng, n, draw).into_vec();
            rows.sort_unstable();
            member.iter_mut().for_each(|m| *m = false);
            rows.iter().for_each(|&r| member[r] = true);
            let sorted = full_sorted
                .iter()
                .map(|l| l.iter().copied().filter(|&r| member[r]).collect())
                .collect();
            (rows, sorted)
        };
        let tree = fit_tree(&cols, &residual, sorted, &rows, params.max_depth);
        for (i, f) in fitted.iter_mut().enumerate() {
            *f += params.shrinkage * tree.predict(&x[i]);
        }
        trees.push(tree);
    }
    Ok(GradientBoostedEnsemble {
        base_prediction,
        shrinkage: params.shrinkage,
        max_depth: params.max_depth,
        subsample: params.subsample,
        rounds: params.rounds,
        seed: params.seed,
        trees,
    })
}
