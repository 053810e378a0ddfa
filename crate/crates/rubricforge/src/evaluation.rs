//! Metrics and uncertainty: tie-aware AUROC/AUPRC, a paired bootstrap over
//! tasks with per-(task, resample) seeded streams, and report rendering.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::par;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("metric undefined: {0}")]
    Degenerate(String),
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredSplit {
    pub task: String,
    pub method: String,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSplit {
    fn check(&self) -> Result<(), EvalError> {
        if self.scores.len() != self.labels.len() {
            return Err(EvalError::LengthMismatch {
                scores: self.scores.len(),
                labels: self.labels.len(),
            });
        }
        if let Some(i) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(EvalError::NonFiniteScore(i));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auroc,
    Auprc,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Auprc => "auprc",
        }
    }

    pub fn compute(&self, split: &ScoredSplit) -> Result<f64, EvalError> {
        match self {
            Metric::Auroc => auroc(split),
            Metric::Auprc => auprc(split),
        }
    }
}

/// Probability that a random positive outscores a random negative, with ties
/// counted as one half. Computed via the rank-sum identity.
pub fn auroc(split: &ScoredSplit) -> Result<f64, EvalError> {
    split.check()?;
    let n_pos = split.labels.iter().filter(|&&l| l).count();
    let n_neg = split.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::Degenerate(
            "auroc requires both classes".into(),
        ));
    }
    let mut order: Vec<usize> = (0..split.scores.len()).collect();
    order.sort_by(|&a, &b| split.scores[a].total_cmp(&split.scores[b]));
    // average ranks within tie groups (ranks are 1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && split.scores[order[j]] == split.scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if split.labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision with block-level credit: examples sharing a score enter
/// the ranking as one group, and each positive in the group receives the
/// precision evaluated at the end of the group.
pub fn auprc(split: &ScoredSplit) -> Result<f64, EvalError> {
    split.check()?;
    let n_pos = split.labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(EvalError::Degenerate(
            "auprc requires at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..split.scores.len()).collect();
    order.sort_by(|&a, &b| split.scores[b].total_cmp(&split.scores[a]));
    let mut seen = 0usize;
    let mut tp = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_pos = 0usize;
        while j < order.len() && split.scores[order[j]] == split.scores[order[i]] {
            if split.labels[order[j]] {
                group_pos += 1;
            }
            j += 1;
        }
        seen += j - i;
        tp += group_pos;
        let precision = tp as f64 / seen as f64;
        ap += group_pos as f64 * precision;
        i = j;
    }
    Ok(ap / n_pos as f64)
}

/// Stream seed for resample `index` of `task` under `global_seed`: first
/// eight bytes of sha256 over the three components, little endian.
fn resample_seed(global_seed: u64, task: &str, index: usize) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(task.as_bytes());
    hasher.update([0x1f]);
    hasher.update((index as u64).to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

const MAX_REDRAWS: usize = 100;

fn bootstrap_one(
    split: &ScoredSplit,
    metric: Metric,
    global_seed: u64,
    index: usize,
    fallback: f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(resample_seed(global_seed, &split.task, index));
    let n = split.scores.len();
    for _ in 0..MAX_REDRAWS {
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            scores.push(split.scores[i]);
            labels.push(split.labels[i]);
        }
        let resample = ScoredSplit {
            task: split.task.clone(),
            method: split.method.clone(),
            scores,
            labels,
        };
        if let Ok(v) = metric.compute(&resample) {
            return v;
        }
    }
    fallback
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub point: f64,
    pub bootstrap_mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_resamples: usize,
    pub seed: u64,
    pub tasks: Vec<String>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Paired bootstrap over a set of tasks. Resample `i` uses one independently
/// seeded stream per task; the group statistic at `i` is the unweighted mean
/// of per-task metric values at that index, so adding or reordering tasks in
/// the map never changes another task's draws. The point estimate is the mean
/// of full-sample metrics. Degenerate resamples are redrawn within the same
/// stream up to 100 times, then fall back to the task point estimate.
pub fn bootstrap_ci(
    splits: &BTreeMap<String, ScoredSplit>,
    metric: Metric,
    n_resamples: usize,
    global_seed: u64,
) -> Result<MetricReport, EvalError> {
    if splits.is_empty() {
        return Err(EvalError::PreconditionViolation("no tasks".into()));
    }
    if n_resamples == 0 {
        return Err(EvalError::PreconditionViolation(
            "n_resamples must be positive".into(),
        ));
    }
    for (name, split) in splits {
        if name != &split.task {
            return Err(EvalError::PreconditionViolation(format!(
                "map key {name} does not match split task {}",
                split.task
            )));
        }
    }
    let mut tasks = Vec::new();
    let mut points = Vec::new();
    for (name, split) in splits {
        points.push(metric.compute(split)?);
        tasks.push(name.clone());
    }
    let point = points.iter().sum::<f64>() / points.len() as f64;

    let ordered: Vec<(&ScoredSplit, f64)> = splits.values().zip(points.iter().copied()).collect();
    let mut stats: Vec<f64> = par::map_range(n_resamples, |i| {
        ordered
            .iter()
            .map(|(split, fallback)| bootstrap_one(split, metric, global_seed, i, *fallback))
            .sum::<f64>()
            / ordered.len() as f64
    });
    let bootstrap_mean = stats.iter().sum::<f64>() / stats.len() as f64;
    stats.sort_by(|a, b| a.total_cmp(b));
    Ok(MetricReport {
        metric,
        point,
        bootstrap_mean,
        ci_lo: percentile(&stats, 0.025),
        ci_hi: percentile(&stats, 0.975),
        n_resamples,
        seed: global_seed,
        tasks,
    })
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportEntry {
    pub method: String,
    pub scope: String,
    pub metric: Metric,
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

/// Three decimals with the leading zero dropped: 0.772 -> ".772".
fn fmt3(x: f64) -> String {
    let s = format!("{:.3}", x);
    if let Some(rest) = s.strip_prefix("0.") {
        format!(".{rest}")
    } else if let Some(rest) = s.strip_prefix("-0.") {
        format!("-.{rest}")
    } else {
        s
    }
}

/// Canonical cell: point then CI, e.g. ".772_{.758-.784}".
pub fn format_metric_cell(point: f64, ci_lo: f64, ci_hi: f64) -> String {
    format!("{}_{{{}-{}}}", fmt3(point), fmt3(ci_lo), fmt3(ci_hi))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderedReport {
    pub table: String,
    pub entries: Vec<ReportEntry>,
}

/// Renders one aligned text table per metric (rows = methods, columns =
/// scopes in first-seen order) plus the JSON-serializable entry list.
pub fn render_report(entries: &[ReportEntry]) -> Result<RenderedReport, EvalError> {
    if entries.is_empty() {
        return Err(EvalError::PreconditionViolation("no entries".into()));
    }
    let mut metrics = Vec::new();
    let mut methods = Vec::new();
    let mut scopes = Vec::new();
    let mut cells: BTreeMap<(String, String, String), String> = BTreeMap::new();
    for e in entries {
        if !e.point.is_finite() || !e.ci_lo.is_finite() || !e.ci_hi.is_finite() {
            return Err(EvalError::NonFiniteScore(0));
        }
        if !metrics.contains(&e.metric) {
            metrics.push(e.metric);
        }
        if !methods.contains(&e.method) {
            methods.push(e.method.clone());
        }
        if !scopes.contains(&e.scope) {
            scopes.push(e.scope.clone());
        }
        let key = (
            e.metric.as_str().to_string(),
            e.method.clone(),
            e.scope.clone(),
        );
        if cells
            .insert(key, format_metric_cell(e.point, e.ci_lo, e.ci_hi))
            .is_some()
        {
            return Err(EvalError::PreconditionViolation(format!(
                "duplicate entry for metric={} method={} scope={}",
                e.metric.as_str(),
                e.method,
                e.scope
            )));
        }
    }

    let mut table = String::new();
    for metric in &metrics {
        let mut widths: Vec<usize> = Vec::with_capacity(scopes.len() + 1);
        widths.push(
            methods
                .iter()
                .map(|m| m.len())
                .chain([metric.as_str().len()])
                .max()
                .unwrap(),
        );
        for scope in &scopes {
            let mut w = scope.len();
            for method in &methods {
                let key = (metric.as_str().to_string(), method.clone(), scope.clone());
                if let Some(cell) = cells.get(&key) {
                    w = w.max(cell.len());
                }
            }
            widths.push(w);
        }
        table.push_str(&format!("{:<width$}", metric.as_str(), width = widths[0]));
        for (scope, w) in scopes.iter().zip(&widths[1..]) {
            table.push_str(&format!("  {:<width$}", scope, width = w));
        }
        table.push('\n');
        for method in &methods {
            table.push_str(&format!("{:<width$}", method, width = widths[0]));
            for (scope, w) in scopes.iter().zip(&widths[1..]) {
                let key = (metric.as_str().to_string(), method.clone(), scope.clone());
                let cell = cells.get(&key).map(String::as_str).unwrap_or("-");
                table.push_str(&format!("  {:<width$}", cell, width = w));
            }
            table.push('\n');
        }
        table.push('\n');
    }
    Ok(RenderedReport {
        table,
        entries: entries.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(scores: Vec<f64>, labels: Vec<bool>) -> ScoredSplit {
        ScoredSplit {
            task: "t".into(),
            method: "m".into(),
            scores,
            labels,
        }
    }

    /// O(n^2) pair-counting oracle for AUROC.
    fn auroc_brute(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            if !yi {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auroc_matches_brute_force_on_random_data() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.gen_range(5..60);
            // quantized scores force tie groups
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            labels[0] = true;
            labels[1] = false;
            let s = split(scores.clone(), labels.clone());
            let fast = auroc(&s).unwrap();
            let slow = auroc_brute(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "fast {fast} slow {slow}");
        }
    }

    #[test]
    fn auroc_known_values() {
        let s = split(vec![0.1, 0.4, 0.35, 0.8], vec![false, false, true, true]);
        assert!((auroc(&s).unwrap() - 0.75).abs() < 1e-12);
        let perfect = split(vec![0.1, 0.2, 0.8, 0.9], vec![false, false, true, true]);
        assert_eq!(auroc(&perfect).unwrap(), 1.0);
        let constant = split(vec![0.5; 6], vec![true, false, true, false, true, false]);
        assert!((auroc(&constant).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let labels = vec![true, false, true, false, false, true, false];
        let scores = vec![0.9, 0.2, 0.7, 0.4, 0.1, 0.6, 0.5];
        let a = auroc(&split(scores.clone(), labels.clone())).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp()).collect();
        let b = auroc(&split(transformed, labels)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn auroc_degenerate_errors() {
        assert!(matches!(
            auroc(&split(vec![0.5, 0.6], vec![true, true])),
            Err(EvalError::Degenerate(_))
        ));
        assert!(matches!(
            auroc(&split(vec![0.5], vec![true, false])),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            auroc(&split(vec![f64::NAN, 0.2], vec![true, false])),
            Err(EvalError::NonFiniteScore(0))
        ));
    }

    #[test]
    fn auprc_known_values() {
        // ranked: 0.8(+), 0.4(-), 0.35(+), 0.1(-)
        let s = split(vec![0.1, 0.4, 0.35, 0.8], vec![false, false, true, true]);
        let expected = (1.0 + 2.0 / 3.0) / 2.0;
        assert!((auprc(&s).unwrap() - expected).abs() < 1e-12);
        let perfect = split(vec![0.1, 0.9], vec![false, true]);
        assert_eq!(auprc(&perfect).unwrap(), 1.0);
    }

    #[test]
    fn auprc_constant_scores_equal_prevalence() {
        let s = split(vec![0.3; 10], vec![true, false, false, true, false, false, false, false, false, false]);
        assert!((auprc(&s).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn auprc_all_negative_errors() {
        assert!(matches!(
            auprc(&split(vec![0.1, 0.2], vec![false, false])),
            Err(EvalError::Degenerate(_))
        ));
    }

    fn demo_splits(tasks: &[&str], n: usize, seed: u64) -> BTreeMap<String, ScoredSplit> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tasks
            .iter()
            .map(|&t| {
                let mut scores = Vec::new();
                let mut labels = Vec::new();
                for i in 0..n {
                    let y = i % 3 == 0;
                    labels.push(y);
                    scores.push(if y { 0.4 } else { 0.2 } + rng.gen::<f64>() * 0.5);
                }
                (t.to_string(), ScoredSplit {
                    task: t.to_string(),
                    method: "m".into(),
                    scores,
                    labels,
                })
            })
            .collect()
    }

    #[test]
    fn bootstrap_is_deterministic_and_ordered() {
        let splits = demo_splits(&["a", "b", "c"], 40, 3);
        let r1 = bootstrap_ci(&splits, Metric::Auroc, 200, 7).unwrap();
        let r2 = bootstrap_ci(&splits, Metric::Auroc, 200, 7).unwrap();
        assert_eq!(r1.point, r2.point);
        assert_eq!(r1.ci_lo, r2.ci_lo);
        assert_eq!(r1.ci_hi, r2.ci_hi);
        assert!(r1.ci_lo <= r1.point && r1.point <= r1.ci_hi);
        assert!(r1.ci_lo <= r1.bootstrap_mean && r1.bootstrap_mean <= r1.ci_hi);
    }

    #[test]
    fn bootstrap_point_is_mean_of_task_metrics() {
        let splits = demo_splits(&["a", "b"], 30, 11);
        let report = bootstrap_ci(&splits, Metric::Auroc, 50, 0).unwrap();
        let manual: f64 = splits.values().map(|s| auroc(s).unwrap()).sum::<f64>() / 2.0;
        assert!((report.point - manual).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_task_streams_are_independent_of_companions() {
        // Task "a" paired with "b" vs paired with "z": a's per-resample draws
        // are identical, so a solo report on {a} matches in both worlds.
        let mut with_b = demo_splits(&["a", "b"], 25, 5);
        let mut with_z = demo_splits(&["a", "z"], 25, 5);
        with_z.insert("a".into(), with_b.get("a").unwrap().clone());
        let solo: BTreeMap<String, ScoredSplit> =
            [("a".to_string(), with_b.get("a").unwrap().clone())].into();
        let solo_report = bootstrap_ci(&solo, Metric::Auroc, 100, 9).unwrap();

        with_b.remove("b");
        with_z.remove("z");
        let r_b = bootstrap_ci(&with_b, Metric::Auroc, 100, 9).unwrap();
        let r_z = bootstrap_ci(&with_z, Metric::Auroc, 100, 9).unwrap();
        assert_eq!(solo_report.ci_lo, r_b.ci_lo);
        assert_eq!(r_b.ci_hi, r_z.ci_hi);
    }

    #[test]
    fn bootstrap_narrows_with_sample_size() {
        let small = demo_splits(&["a"], 30, 13);
        let large = demo_splits(&["a"], 3000, 13);
        let rs = bootstrap_ci(&small, Metric::Auroc, 300, 1).unwrap();
        let rl = bootstrap_ci(&large, Metric::Auroc, 300, 1).unwrap();
        assert!(rl.ci_hi - rl.ci_lo < rs.ci_hi - rs.ci_lo);
    }

    #[test]
    fn bootstrap_handles_degenerate_redraw() {
        // one positive among many: many resamples miss it and must redraw
        let mut labels = vec![false; 12];
        labels[0] = true;
        let scores: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let splits: BTreeMap<String, ScoredSplit> = [(
            "a".to_string(),
            ScoredSplit {
                task: "a".into(),
                method: "m".into(),
                scores,
                labels,
            },
        )]
        .into();
        let report = bootstrap_ci(&splits, Metric::Auroc, 200, 2).unwrap();
        assert!(report.ci_lo.is_finite() && report.ci_hi.is_finite());
    }

    #[test]
    fn cell_format_is_exact() {
        assert_eq!(
            format_metric_cell(0.772, 0.758, 0.784),
            ".772_{.758-.784}"
        );
        assert_eq!(format_metric_cell(1.0, 0.9995, 1.0), "1.000_{1.000-1.000}");
        assert_eq!(format_metric_cell(0.5, 0.0, 0.75), ".500_{.000-.750}");
    }

    #[test]
    fn render_report_round_trips_through_json() {
        let entries = vec![
            ReportEntry {
                method: "global_rubric_tabular".into(),
                scope: "overall".into(),
                metric: Metric::Auroc,
                point: 0.772,
                ci_lo: 0.758,
                ci_hi: 0.784,
                n_resamples: 1000,
                seed: 0,
            },
            ReportEntry {
                method: "naive_text".into(),
                scope: "overall".into(),
                metric: Metric::Auroc,
                point: 0.601,
                ci_lo: 0.58,
                ci_hi: 0.63,
                n_resamples: 1000,
                seed: 0,
            },
        ];
        let rendered = render_report(&entries).unwrap();
        assert!(rendered.table.contains(".772_{.758-.784}"));
        let json = serde_json::to_string(&rendered.entries).unwrap();
        let parsed: Vec<ReportEntry> = serde_json::from_str(&json).unwrap();
        let again = render_report(&parsed).unwrap();
        assert_eq!(rendered.table, again.table);
    }

    #[test]
    fn render_report_rejects_duplicates() {
        let e = ReportEntry {
            method: "m".into(),
            scope: "overall".into(),
            metric: Metric::Auroc,
            point: 0.5,
            ci_lo: 0.4,
            ci_hi: 0.6,
            n_resamples: 10,
            seed: 0,
        };
        assert!(matches!(
            render_report(&[e.clone(), e]),
            Err(EvalError::PreconditionViolation(_))
        ));
    }
}
