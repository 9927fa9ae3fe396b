//! Evaluation of uncertainty scores: ROC for low-accuracy detection,
//! budget-correction curves, recoverability breakdown and the sweep
//! analyses in [`sweeps`].

pub mod report;
pub mod sweeps;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{percentile_interval, stream_rng, BootstrapSettings, Correlation};
use crate::trace::PromptTrace;

pub use report::{evaluate, EvaluationOptions, EvaluationReport, NamedCorrelation, RankingSummary};
pub use sweeps::{
    growing_window_sweep, progressive_training, temperature_summary, truncated_answer_key, truncated_pe,
    truncated_pe_grid, TemperaturePoint, TemperatureSummary, TruncationCell, TruncationGrid,
};

pub const DEFAULT_LOW_ACCURACY_THRESHOLD: f64 = 0.5;

/// `true` ("flag for review") iff accuracy is strictly below `threshold`.
pub fn low_accuracy_labels(accuracies: &[f64], threshold: f64) -> Vec<bool> {
    accuracies.iter().map(|&a| a < threshold).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Score at or above which items are flagged; `None` for the origin.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

fn check_scores(scores: &[f64], len: usize) -> Result<()> {
    if scores.len() != len {
        return Err(Error::LengthMismatch(scores.len(), len));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("score {i} is not finite")));
    }
    Ok(())
}

/// Indices ordered by descending score, ties kept in input order.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Sweeps a threshold over the distinct scores, highest first. Higher
/// scores mean "more likely positive".
///
/// The area is accumulated as an integer count of concordant pairs
/// (doubled, ties adding one), so it equals the pairwise-concordance
/// probability exactly.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    check_scores(scores, labels.len())?;
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let order = descending_order(scores);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: None,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area = 0u128;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dp, mut dn) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                dp += 1;
            } else {
                dn += 1;
            }
            i += 1;
        }
        twice_area += dn as u128 * (2 * tp + dp) as u128;
        tp += dp;
        fp += dn;
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold: Some(s),
        });
    }
    let auc = twice_area as f64 / (2 * positives as u64 * negatives as u64) as f64;
    Ok(RocCurve {
        points,
        auc,
        positives,
        negatives,
    })
}

/// `B = 0.00, 0.01, ..., 1.00`.
pub fn default_budget_grid() -> Vec<f64> {
    uniform_grid(101)
}

pub fn uniform_grid(points: usize) -> Vec<f64> {
    let last = (points.max(2) - 1) as f64;
    (0..points.max(2)).map(|i| i as f64 / last).collect()
}

/// Parses either a point count (`"101"`) or an explicit list (`"0,0.5,1"`).
pub fn parse_budget_grid(text: &str) -> Result<Vec<f64>> {
    let text = text.trim();
    if !text.contains(',') {
        if let Ok(n) = text.parse::<usize>() {
            if n < 2 {
                return Err(Error::InvalidGrid(format!("a grid needs at least 2 points, got {n}")));
            }
            return Ok(uniform_grid(n));
        }
    }
    let grid = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidGrid(format!("not a number: {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_grid(&grid)?;
    Ok(grid)
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid("empty grid".into()));
    }
    if grid.iter().any(|b| !(0.0..=1.0).contains(b)) {
        return Err(Error::InvalidGrid("budgets must lie in [0, 1]".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidGrid("budgets must be strictly ascending".into()));
    }
    Ok(())
}

/// Number of prompts corrected at budget `b`: `ceil(b n)`, with a small
/// guard so that e.g. `0.07 * 100` is not rounded up to 8.
pub fn corrected_count(budget: f64, n: usize) -> usize {
    (((budget * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Mean of accuracies, summed in ascending order.
///
/// The fixed summation order makes the result a function of the multiset
/// of values, so corrections that raise values never lower it.
pub fn dataset_accuracy(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / values.len() as f64
}

/// Dataset accuracy after the `ceil(b n)` highest-scoring prompts are set to 1.
pub fn budget_point(accuracies: &[f64], scores: &[f64], budget: f64) -> Result<f64> {
    check_scores(scores, accuracies.len())?;
    let order = descending_order(scores);
    Ok(corrected_accuracy(accuracies, &order, corrected_count(budget, accuracies.len())))
}

fn corrected_accuracy(accuracies: &[f64], order: &[usize], k: usize) -> f64 {
    let mut corrected = accuracies.to_vec();
    for &i in &order[..k] {
        corrected[i] = 1.0;
    }
    dataset_accuracy(&corrected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCurve {
    pub ranking_name: String,
    pub grid: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Empty when no bootstrap was requested.
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
}

impl BudgetCurve {
    pub fn auc(&self) -> Result<f64> {
        budget_auc(&self.grid, &self.accuracy)
    }
}

/// Accuracy at every budget of `grid` when prompts are corrected in
/// descending `scores` order; optionally with percentile bootstrap bands
/// over prompt resamples.
pub fn budget_curve(
    ranking_name: &str,
    scores: &[f64],
    accuracies: &[f64],
    grid: &[f64],
    bootstrap: Option<BootstrapSettings>,
) -> Result<BudgetCurve> {
    check_scores(scores, accuracies.len())?;
    validate_grid(grid)?;
    if accuracies.is_empty() {
        return Err(Error::TooFewValues { needed: 1, got: 0 });
    }
    let n = accuracies.len();
    let order = descending_order(scores);
    let accuracy = grid
        .iter()
        .map(|&b| corrected_accuracy(accuracies, &order, corrected_count(b, n)))
        .collect();
    let (ci_low, ci_high) = match bootstrap {
        Some(settings) => budget_bands(scores, accuracies, grid, settings)?,
        None => (Vec::new(), Vec::new()),
    };
    Ok(BudgetCurve {
        ranking_name: ranking_name.to_owned(),
        grid: grid.to_vec(),
        accuracy,
        ci_low,
        ci_high,
    })
}

fn budget_bands(
    scores: &[f64],
    accuracies: &[f64],
    grid: &[f64],
    settings: BootstrapSettings,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if settings.resamples == 0 || !(settings.level > 0.0 && settings.level < 1.0) {
        return Err(Error::InvalidArgument("bootstrap needs resamples >= 1 and level in (0, 1)".into()));
    }
    let n = accuracies.len();
    let curves: Vec<Vec<f64>> = (0..settings.resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(settings.seed, r as u64);
            let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let s: Vec<f64> = picks.iter().map(|&i| scores[i]).collect();
            let order = descending_order(&s);
            // suffix[j] = sum of accuracies ranked at j and below
            let mut suffix = vec![0.0; n + 1];
            for j in (0..n).rev() {
                suffix[j] = suffix[j + 1] + accuracies[picks[order[j]]];
            }
            grid.iter()
                .map(|&b| {
                    let k = corrected_count(b, n);
                    (k as f64 + suffix[k]) / n as f64
                })
                .collect()
        })
        .collect();
    let mut low = Vec::with_capacity(grid.len());
    let mut high = Vec::with_capacity(grid.len());
    for g in 0..grid.len() {
        let (lo, hi) = percentile_interval(curves.iter().map(|c| c[g]).collect(), settings.level);
        low.push(lo);
        high.push(hi);
    }
    Ok((low, high))
}

/// Trapezoidal area under an accuracy-vs-budget curve spanning `[0, 1]`.
pub fn budget_auc(grid: &[f64], accuracy: &[f64]) -> Result<f64> {
    if grid.len() != accuracy.len() {
        return Err(Error::LengthMismatch(grid.len(), accuracy.len()));
    }
    if grid.len() < 2 || grid[0] != 0.0 || grid[grid.len() - 1] != 1.0 {
        return Err(Error::InvalidGrid("budget AUC needs a grid from 0 to 1".into()));
    }
    Ok(grid
        .windows(2)
        .zip(accuracy.windows(2))
        .map(|(b, a)| (b[1] - b[0]) * (a[0] + a[1]) / 2.0)
        .sum())
}

/// Scores that correct the least accurate prompts first.
pub fn oracle_ranking(accuracies: &[f64]) -> Vec<f64> {
    accuracies.iter().map(|a| 1.0 - a).collect()
}

/// A seeded random permutation expressed as scores `0, 1/n, ...`.
pub fn random_ranking(seed: u64, n: usize) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(&mut stream_rng(seed, 0));
    ranks.into_iter().map(|r| r as f64 / n.max(1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverabilityRow {
    pub prompt_count: usize,
    pub always_correct: f64,
    pub never_correct_no_unc: f64,
    pub never_correct_with_unc: f64,
    pub sometimes_correct: f64,
    /// Cases with answer variability that a threshold could flag.
    pub recoverable_total: f64,
}

/// Splits prompts by how often they are right and whether their answers vary.
pub fn recoverability_table(traces: &[PromptTrace]) -> RecoverabilityRow {
    let mut counts = [0usize; 4];
    for t in traces {
        let outcomes = t.outcomes();
        let correct = outcomes.iter().filter(|o| o.correct).count();
        let slot = if correct == outcomes.len() && correct > 0 {
            0
        } else if correct == 0 && t.unique_answers() <= 1 {
            1
        } else if correct == 0 {
            2
        } else {
            3
        };
        counts[slot] += 1;
    }
    let n = traces.len().max(1) as f64;
    let f = counts.map(|c| c as f64 / n);
    RecoverabilityRow {
        prompt_count: traces.len(),
        always_correct: f[0],
        never_correct_no_unc: f[1],
        never_correct_with_unc: f[2],
        sometimes_correct: f[3],
        recoverable_total: f[2] + f[3],
    }
}

/// Spearman values against an x-axis (training sizes, window ends, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSeries {
    pub name: String,
    pub x: Vec<usize>,
    pub rho: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl CorrelationSeries {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            x: Vec::new(),
            rho: Vec::new(),
            degenerate: Vec::new(),
        }
    }

    pub fn push(&mut self, x: usize, c: Correlation) {
        self.x.push(x);
        self.rho.push(c.rho);
        self.degenerate.push(c.degenerate);
    }
}
