//! Downstream classifiers: L2-regularized logistic regression fit by damped
//! Newton iterations, and second-order gradient boosted trees on log loss.
//! Hyperparameters are selected by validation-split negative log likelihood.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::transform::FeatureMatrix;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("training data contains a single class")]
    SingleClass,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("feature dimension mismatch: model has {model}, data has {data}")]
    DimensionMismatch { model: usize, data: usize },
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_both_classes(labels: &[bool]) -> Result<(), LearnError> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(LearnError::SingleClass);
    }
    Ok(())
}

const PROB_EPS: f64 = 1e-12;

/// Mean negative log likelihood of probabilistic scores.
pub fn negative_log_likelihood(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let n = scores.len().max(1) as f64;
    scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub iterations: usize,
    pub final_objective: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub meta: TrainingMeta,
}

/// Penalized objective: mean log loss plus (lambda/2)*||w||^2, bias excluded.
pub fn logreg_objective(x: &FeatureMatrix, weights: &[f64], bias: f64, lambda: f64) -> f64 {
    let n = x.rows as f64;
    let mut loss = 0.0;
    for i in 0..x.rows {
        let z: f64 = x.row(i).iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() + bias;
        // log(1 + exp(-margin)) in a numerically stable form
        let margin = if x.labels[i] { z } else { -z };
        loss += if margin > 0.0 {
            (-margin).exp().ln_1p()
        } else {
            -margin + margin.exp().ln_1p()
        };
    }
    loss / n + 0.5 * lambda * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Gradient of the penalized objective in (weights, bias) order.
pub fn logreg_gradient(x: &FeatureMatrix, weights: &[f64], bias: f64, lambda: f64) -> Vec<f64> {
    let cols = x.cols;
    let n = x.rows as f64;
    let mut grad = vec![0.0; cols + 1];
    for i in 0..x.rows {
        let row = x.row(i);
        let z: f64 = row.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() + bias;
        let residual = sigmoid(z) - if x.labels[i] { 1.0 } else { 0.0 };
        for (g, v) in grad[..cols].iter_mut().zip(row) {
            *g += residual * v;
        }
        grad[cols] += residual;
    }
    for g in grad.iter_mut() {
        *g /= n;
    }
    for (g, w) in grad[..cols].iter_mut().zip(weights) {
        *g += lambda * w;
    }
    grad
}

/// Cholesky solve of a symmetric positive definite system, in place.
fn cholesky_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for j in 0..n {
        for k in 0..j {
            let ljk = a[j][k];
            for i in j..n {
                a[i][j] -= a[i][k] * ljk;
            }
        }
        if a[j][j] <= 0.0 {
            return None;
        }
        let d = a[j][j].sqrt();
        for i in j..n {
            a[i][j] /= d;
        }
    }
    // forward substitution L y = b
    for i in 0..n {
        for k in 0..i {
            b[i] -= a[i][k] * b[k];
        }
        b[i] /= a[i][i];
    }
    // back substitution L^T x = y
    for i in (0..n).rev() {
        for k in i + 1..n {
            b[i] -= a[k][i] * b[k];
        }
        b[i] /= a[i][i];
    }
    Some(b)
}

/// Fits L2-penalized logistic regression by damped Newton steps from w = 0
/// until the gradient infinity-norm drops below `tol`.
pub fn train_logreg(
    x: &FeatureMatrix,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LogRegModel, LearnError> {
    if x.rows == 0 {
        return Err(LearnError::PreconditionViolation("empty matrix".into()));
    }
    if lambda < 0.0 || tol <= 0.0 {
        return Err(LearnError::PreconditionViolation(
            "lambda must be >= 0 and tol positive".into(),
        ));
    }
    if x.values.iter().any(|v| !v.is_finite()) {
        return Err(LearnError::NonFinite("feature matrix".into()));
    }
    check_both_classes(&x.labels)?;

    let cols = x.cols;
    let dim = cols + 1;
    let n = x.rows as f64;
    let mut weights = vec![0.0; cols];
    let mut bias = 0.0;
    let mut objective = logreg_objective(x, &weights, bias, lambda);
    let mut iterations = 0;

    for _ in 0..max_iter {
        let grad = logreg_gradient(x, &weights, bias, lambda);
        let gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gnorm < tol {
            break;
        }
        iterations += 1;

        // Hessian = (1/n) X~^T R X~ + lambda on the weight block.
        let mut hess = vec![vec![0.0f64; dim]; dim];
        for i in 0..x.rows {
            let row = x.row(i);
            let z: f64 = row.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>() + bias;
            let p = sigmoid(z);
            let r = (p * (1.0 - p)).max(1e-12);
            for a in 0..cols {
                let ra = r * row[a];
                for b in a..cols {
                    hess[b][a] += ra * row[b];
                }
                hess[cols][a] += ra;
            }
            hess[cols][cols] += r;
        }
        for a in 0..dim {
            for b in a..dim {
                hess[b][a] /= n;
            }
        }
        for a in 0..cols {
            hess[a][a] += lambda;
        }
        for a in 0..dim {
            hess[a][a] += 1e-10; // jitter keeps the factorization alive at lambda=0
        }

        let step = match cholesky_solve(hess, grad.clone()) {
            Some(s) => s,
            None => return Err(LearnError::NonFinite("singular hessian".into())),
        };

        // Backtracking keeps the Newton step inside the descent region.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand_w: Vec<f64> = weights
                .iter()
                .zip(&step)
                .map(|(w, s)| w - scale * s)
                .collect();
            let cand_b = bias - scale * step[cols];
            let cand_obj = logreg_objective(x, &cand_w, cand_b, lambda);
            if cand_obj <= objective + 1e-15 {
                weights = cand_w;
                bias = cand_b;
                objective = cand_obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    if !objective.is_finite() || weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
        return Err(LearnError::NonFinite("fitted parameters".into()));
    }
    Ok(LogRegModel {
        weights,
        bias,
        lambda,
        meta: TrainingMeta {
            iterations,
            final_objective: objective,
        },
    })
}

/// Sigmoid of the linear score for every row.
pub fn predict_logreg(model: &LogRegModel, x: &FeatureMatrix) -> Result<Vec<f64>, LearnError> {
    if x.cols != model.weights.len() {
        return Err(LearnError::DimensionMismatch {
            model: model.weights.len(),
            data: x.cols,
        });
    }
    Ok(par::map_range(x.rows, |i| {
        let z: f64 = x.row(i)
            .iter()
            .zip(&model.weights)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + model.bias;
        sigmoid(z)
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperparamSearchResult<T> {
    pub grid: Vec<T>,
    pub val_nll: Vec<f64>,
    pub selected: usize,
}

/// Default penalty grid: 10 log-spaced values in [1e-4, 1e3].
pub fn default_lambda_grid() -> Vec<f64> {
    let lo: f64 = 1e-4;
    let hi: f64 = 1e3;
    (0..10)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / 9.0).exp())
        .collect()
}

/// Trains once per grid candidate and keeps the one with minimal validation
/// NLL; exact ties resolve to the first grid element.
pub fn sweep_logreg(
    train: &FeatureMatrix,
    val: &FeatureMatrix,
    lambda_grid: &[f64],
    tol: f64,
) -> Result<(HyperparamSearchResult<f64>, LogRegModel), LearnError> {
    if lambda_grid.is_empty() {
        return Err(LearnError::EmptyGrid);
    }
    let fits: Vec<Result<(LogRegModel, f64), LearnError>> =
        par::map_slice(lambda_grid, |&lambda| {
            let model = train_logreg(train, lambda, tol, 100)?;
            let scores = predict_logreg(&model, val)?;
            Ok((model, negative_log_likelihood(&scores, &val.labels)))
        });
    let mut models = Vec::with_capacity(fits.len());
    let mut val_nll = Vec::with_capacity(fits.len());
    for fit in fits {
        let (model, nll) = fit?;
        models.push(model);
        val_nll.push(nll);
    }
    let mut selected = 0;
    for (i, &nll) in val_nll.iter().enumerate() {
        if nll < val_nll[selected] {
            selected = i;
        }
    }
    let model = models.swap_remove(selected);
    Ok((
        HyperparamSearchResult {
            grid: lambda_grid.to_vec(),
            val_nll,
            selected,
        },
        model,
    ))
}

// ---------------------------------------------------------------------------
// Gradient boosted trees
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmHyperparams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub subsample: f64,
}

impl GbmHyperparams {
    pub fn validate(&self) -> Result<(), LearnError> {
        if self.max_depth == 0
            || !(0.0..=1.0).contains(&self.learning_rate)
            || self.learning_rate == 0.0
            || !(0.0..=1.0).contains(&self.subsample)
            || self.subsample == 0.0
        {
            return Err(LearnError::PreconditionViolation(
                "invalid gbm hyperparameters".into(),
            ));
        }
        Ok(())
    }
}

/// Default grid over the four tuned knobs (16 candidates).
pub fn default_gbm_grid() -> Vec<GbmHyperparams> {
    let mut grid = Vec::new();
    for &n_estimators in &[50usize, 200] {
        for &max_depth in &[2usize, 4] {
            for &learning_rate in &[0.05f64, 0.2] {
                for &subsample in &[0.7f64, 1.0] {
                    grid.push(GbmHyperparams {
                        n_estimators,
                        max_depth,
                        learning_rate,
                        subsample,
                    });
                }
            }
        }
    }
    grid
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbmModel {
    pub trees: Vec<RegressionTree>,
    pub hyperparams: GbmHyperparams,
    pub base_score: f64,
    pub n_features: usize,
}

const HESS_EPS: f64 = 1e-9;
const MIN_CHILD_WEIGHT: f64 = 1.0;
const LEAF_CLAMP: f64 = 4.0;

struct TreeBuilder<'a> {
    x: &'a FeatureMatrix,
    grad: &'a [f64],
    hess: &'a [f64],
    max_depth: usize,
    nodes: Vec<TreeNode>,
}

impl<'a> TreeBuilder<'a> {
    fn leaf_value(&self, rows: &[usize]) -> f64 {
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        (-g / (h + HESS_EPS)).clamp(-LEAF_CLAMP, LEAF_CLAMP)
    }

    fn best_split(&self, rows: &[usize]) -> Option<(usize, f64, f64)> {
        let total_g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let total_h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let parent_score = total_g * total_g / (total_h + HESS_EPS);

        let candidates: Vec<Option<(f64, usize, f64)>> = par::map_range(self.x.cols, |feature| {
            let mut ordered: Vec<(f64, usize)> = rows
                .iter()
                .map(|&i| (self.x.row(i)[feature], i))
                .collect();
            ordered.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut g_left = 0.0;
            let mut h_left = 0.0;
            let mut best: Option<(f64, usize, f64)> = None;
            for w in 0..ordered.len() - 1 {
                g_left += self.grad[ordered[w].1];
                h_left += self.hess[ordered[w].1];
                if ordered[w].0 == ordered[w + 1].0 {
                    continue;
                }
                let h_right = total_h - h_left;
                if h_left < MIN_CHILD_WEIGHT || h_right < MIN_CHILD_WEIGHT {
                    continue;
                }
                let g_right = total_g - g_left;
                let gain = g_left * g_left / (h_left + HESS_EPS)
                    + g_right * g_right / (h_right + HESS_EPS)
                    - parent_score;
                let threshold = 0.5 * (ordered[w].0 + ordered[w + 1].0);
                if best.map_or(true, |(bg, _, _)| gain > bg) {
                    best = Some((gain, feature, threshold));
                }
            }
            best
        });
        candidates
            .into_iter()
            .flatten()
            // deterministic tie break: highest gain, then lowest feature index
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
            .filter(|&(gain, _, _)| gain > 1e-12)
            .map(|(gain, feature, threshold)| (feature, threshold, gain))
    }

    fn build(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        if depth < self.max_depth && rows.len() >= 2 {
            if let Some((feature, threshold, _)) = self.best_split(&rows) {
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
                    .into_iter()
                    .partition(|&i| self.x.row(i)[feature] <= threshold);
                let idx = self.nodes.len();
                self.nodes.push(TreeNode::Leaf { value: 0.0 }); // placeholder
                let left = self.build(left_rows, depth + 1);
                let right = self.build(right_rows, depth + 1);
                self.nodes[idx] = TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
                return idx;
            }
        }
        let idx = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            value: self.leaf_value(&rows),
        });
        idx
    }
}

/// Boosted log loss: each stage fits a regression tree to the first/second
/// order gradients at the current log-odds, on a row subsample drawn under
/// `seed`; leaf values are -G/(H+eps) scaled by the learning rate.
pub fn train_gbm(
    x: &FeatureMatrix,
    hp: GbmHyperparams,
    seed: u64,
) -> Result<GbmModel, LearnError> {
    hp.validate()?;
    if x.rows == 0 {
        return Err(LearnError::PreconditionViolation("empty matrix".into()));
    }
    check_both_classes(&x.labels)?;

    let n = x.rows;
    let prevalence = x.labels.iter().filter(|&&l| l).count() as f64 / n as f64;
    let base_score = (prevalence / (1.0 - prevalence)).ln();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log_odds = vec![base_score; n];
    let mut trees = Vec::with_capacity(hp.n_estimators);
    let mut grad = vec![0.0f64; n];
    let mut hess = vec![0.0f64; n];

    for _stage in 0..hp.n_estimators {
        for i in 0..n {
            let p = sigmoid(log_odds[i]);
            grad[i] = p - if x.labels[i] { 1.0 } else { 0.0 };
            hess[i] = (p * (1.0 - p)).max(1e-16);
        }
        let rows: Vec<usize> = if hp.subsample < 1.0 {
            let m = ((n as f64 * hp.subsample).floor() as usize).max(1);
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            let mut chosen = all[..m].to_vec();
            chosen.sort_unstable();
            chosen
        } else {
            (0..n).collect()
        };
        let mut builder = TreeBuilder {
            x,
            grad: &grad,
            hess: &hess,
            max_depth: hp.max_depth,
            nodes: Vec::new(),
        };
        let root = builder.build(rows, 0);
        debug_assert_eq!(root, 0);
        let tree = RegressionTree {
            nodes: builder.nodes,
        };
        for i in 0..n {
            log_odds[i] += hp.learning_rate * tree.predict_row(x.row(i));
        }
        trees.push(tree);
    }

    Ok(GbmModel {
        trees,
        hyperparams: hp,
        base_score,
        n_features: x.cols,
    })
}

pub fn predict_gbm(model: &GbmModel, x: &FeatureMatrix) -> Result<Vec<f64>, LearnError> {
    if x.cols != model.n_features {
        return Err(LearnError::DimensionMismatch {
            model: model.n_features,
            data: x.cols,
        });
    }
    Ok(par::map_range(x.rows, |i| {
        let row = x.row(i);
        let z = model.base_score
            + model.hyperparams.learning_rate
                * model
                    .trees
                    .iter()
                    .map(|t| t.predict_row(row))
                    .sum::<f64>();
        sigmoid(z)
    }))
}

/// Grid sweep for the boosted-tree learner; selection by validation NLL,
/// deterministic under `seed`.
pub fn sweep_gbm(
    train: &FeatureMatrix,
    val: &FeatureMatrix,
    grid: &[GbmHyperparams],
    seed: u64,
) -> Result<(HyperparamSearchResult<GbmHyperparams>, GbmModel), LearnError> {
    if grid.is_empty() {
        return Err(LearnError::EmptyGrid);
    }
    let fits: Vec<Result<(GbmModel, f64), LearnError>> = par::map_slice(grid, |&hp| {
        let model = train_gbm(train, hp, seed)?;
        let scores = predict_gbm(&model, val)?;
        Ok((model, negative_log_likelihood(&scores, &val.labels)))
    });
    let mut models = Vec::with_capacity(fits.len());
    let mut val_nll = Vec::with_capacity(fits.len());
    for fit in fits {
        let (model, nll) = fit?;
        models.push(model);
        val_nll.push(nll);
    }
    let mut selected = 0;
    for (i, &nll) in val_nll.iter().enumerate() {
        if nll < val_nll[selected] {
            selected = i;
        }
    }
    let model = models.swap_remove(selected);
    Ok((
        HyperparamSearchResult {
            grid: grid.to_vec(),
            val_nll,
            selected,
        },
        model,
    ))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::datamodel::RecordKey;
    use rand::Rng;

    pub fn matrix(values: Vec<Vec<f64>>, labels: Vec<bool>) -> FeatureMatrix {
        let rows = values.len();
        let cols = values.first().map(|r| r.len()).unwrap_or(0);
        FeatureMatrix {
            rows,
            cols,
            values: values.into_iter().flatten().collect(),
            labels,
            keys: (0..rows)
                .map(|i| RecordKey {
                    patient_id: i as i64,
                    prediction_time: "2021-01-01T00:00:00".into(),
                })
                .collect(),
            schema: None,
        }
    }

    /// Linearly separable synthetic data with margin.
    pub fn separable(n: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2 == 0;
            let base = if y { 1.0 } else { -1.0 };
            rows.push(vec![base + rng.gen::<f64>() * 0.2]);
            labels.push(y);
        }
        matrix(rows, labels)
    }

    /// Noisy learnable data: label depends on feature 0 with flip noise.
    pub fn learnable(n: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let x0: f64 = rng.gen::<f64>() * 2.0 - 1.0;
            let x1: f64 = rng.gen::<f64>() * 2.0 - 1.0;
            let y = x0 + 0.3 * rng.gen::<f64>() > 0.0;
            rows.push(vec![x0, x1]);
            labels.push(y);
        }
        matrix(rows, labels)
    }
}
