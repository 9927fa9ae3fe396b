//! Sweeps: training-set size, truncated PE, temperature and growing window.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{budget_auc, budget_curve, default_budget_grid, recoverability_table, CorrelationSeries};
use crate::error::{Error, Result};
use crate::features::{build_training_pairs, FeatureConfig, FeatureGroup, Segment, DEFAULT_GENERATED_TOKENS};
use crate::forest::cv::{fold_correlation, PromptIndex};
use crate::forest::{cross_validate, fit_fold, grouped_kfold, CvOptions, Dataset, ForestHyperparams, PromptScore};
use crate::measures::{answer_distribution, predictive_entropy, uncertainty_target, TargetKind};
use crate::stats::{mean, spearman, Correlation};
use crate::trace::{PromptTrace, TraceSet};

/// Mean over folds of the validation-fold Spearman after training on the
/// first `s` training prompts (trace order) for each `s` in `sizes`.
///
/// The validation folds are those of grouped CV with the same seed, and
/// each fold model uses the same seed as in [`cross_validate`], so the full
/// training size reproduces its mean fold correlation.
pub fn progressive_training(
    traces: &[PromptTrace],
    cfg: &FeatureConfig,
    target_kind: TargetKind,
    hp: &ForestHyperparams,
    sizes: &[usize],
    k: usize,
) -> Result<CorrelationSeries> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(Error::InvalidArgument("sizes must be positive and strictly ascending".into()));
    }
    let pairs = build_training_pairs(traces, cfg, target_kind)?;
    let data = Dataset::from_pairs(&pairs)?;
    let index = PromptIndex::new(&pairs);
    let opts = CvOptions {
        k,
        seed: hp.seed,
        ..Default::default()
    };
    let folds = grouped_kfold(&index.ids, k, opts.seed)?;
    let prompt_fold: Vec<usize> = index.ids.iter().map(|id| folds.folds[id]).collect();

    let jobs: Vec<(usize, usize)> = (0..sizes.len()).flat_map(|s| (0..k).map(move |f| (s, f))).collect();
    let results: Vec<Correlation> = jobs
        .par_iter()
        .map(|&(si, f)| {
            let train_prompts: Vec<usize> = (0..index.ids.len())
                .filter(|&p| prompt_fold[p] != f)
                .take(sizes[si])
                .collect();
            let mut rows: Vec<usize> = train_prompts.iter().flat_map(|&p| index.rows[p].iter().copied()).collect();
            rows.sort_unstable();
            let model = fit_fold(&data, &rows, hp, f)?;
            let scored = (0..index.ids.len())
                .filter(|&p| prompt_fold[p] == f)
                .map(|p| {
                    let preds = index.rows[p]
                        .iter()
                        .map(|&r| model.predict_values(data.row(r)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(PromptScore {
                        prompt_id: index.ids[p].clone(),
                        fold: Some(f),
                        target: pairs[index.rows[p][0]].target,
                        score: mean(&preds),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            fold_correlation(&scored)
        })
        .collect::<Result<_>>()?;

    let mut series = CorrelationSeries::new("progressive_training");
    for (si, &s) in sizes.iter().enumerate() {
        let per_fold = &results[si * k..(si + 1) * k];
        let rho = mean(&per_fold.iter().map(|c| c.rho).collect::<Vec<_>>());
        series.push(
            s,
            Correlation {
                rho,
                degenerate: per_fold.iter().any(|c| c.degenerate),
            },
        );
    }
    Ok(series)
}

/// Answer identity under a token cap: the first `k` token texts joined,
/// or the full answer text when uncapped.
pub fn truncated_answer_key(trace: &PromptTrace, gen_index: usize, token_cap: Option<usize>) -> String {
    let g = &trace.generations[gen_index];
    match token_cap {
        None => g.answer_text.clone(),
        Some(k) => g.generated_tokens.iter().take(k).map(|t| t.token_text.as_str()).collect(),
    }
}

/// Normalized PE over the first `m` generations with answers cut to `token_cap` tokens.
pub fn truncated_pe(trace: &PromptTrace, m: usize, token_cap: Option<usize>) -> f64 {
    let keys: Vec<String> = (0..m.min(trace.generations.len()))
        .map(|g| truncated_answer_key(trace, g, token_cap))
        .collect();
    predictive_entropy(&answer_distribution(keys.iter().map(String::as_str))).1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationCell {
    pub generations: usize,
    /// `None` means no cap.
    pub token_cap: Option<usize>,
    pub rho: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationGrid {
    pub generation_counts: Vec<usize>,
    pub token_caps: Vec<Option<usize>>,
    /// Row-major: one row per generation count.
    pub cells: Vec<TruncationCell>,
}

impl TruncationGrid {
    pub fn cell(&self, generations: usize, token_cap: Option<usize>) -> Option<&TruncationCell> {
        self.cells
            .iter()
            .find(|c| c.generations == generations && c.token_cap == token_cap)
    }
}

/// Spearman of truncated PE against full PE for every (generations, cap) cell.
pub fn truncated_pe_grid(
    traces: &[PromptTrace],
    generation_counts: &[usize],
    token_caps: &[Option<usize>],
) -> Result<TruncationGrid> {
    if generation_counts.contains(&0) || token_caps.contains(&Some(0)) {
        return Err(Error::InvalidArgument("generation counts and token caps must be >= 1".into()));
    }
    let full: Vec<f64> = traces.iter().map(|t| truncated_pe(t, t.generations.len(), None)).collect();
    let jobs: Vec<(usize, Option<usize>)> = generation_counts
        .iter()
        .flat_map(|&m| token_caps.iter().map(move |&k| (m, k)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(m, k)| {
            let truncated: Vec<f64> = traces.iter().map(|t| truncated_pe(t, m, k)).collect();
            let c = spearman(&truncated, &full)?;
            Ok(TruncationCell {
                generations: m,
                token_cap: k,
                rho: c.rho,
                degenerate: c.degenerate,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TruncationGrid {
        generation_counts: generation_counts.to_vec(),
        token_caps: token_caps.to_vec(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperaturePoint {
    pub temperature: f64,
    pub budget_auc: f64,
    /// Budget AUC min-max rescaled over the sweep.
    pub relative_index: f64,
    pub no_variation_fraction: f64,
    pub always_correct_fraction: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSummary {
    pub points: Vec<TemperaturePoint>,
}

/// Budget AUC of the PE ranking per temperature, rescaled to `[0, 1]` over
/// the sweep (all 1 when every AUC is equal), with answer-variability stats.
pub fn temperature_summary(sets: &[TraceSet]) -> Result<TemperatureSummary> {
    if sets.len() < 2 {
        return Err(Error::InvalidArgument("a temperature sweep needs at least 2 trace sets".into()));
    }
    let temps: BTreeSet<u64> = sets.iter().map(|s| s.metadata.temperature.to_bits()).collect();
    if temps.len() != sets.len() {
        return Err(Error::InvalidArgument("temperatures in a sweep must be distinct".into()));
    }
    let grid = default_budget_grid();
    let mut points = sets
        .iter()
        .map(|set| {
            let pe = set
                .traces
                .iter()
                .map(|t| Ok(uncertainty_target(t)?.pe_norm))
                .collect::<Result<Vec<_>>>()?;
            let acc = set.accuracies();
            let curve = budget_curve("pe", &pe, &acc, &grid, None)?;
            let n = set.traces.len().max(1) as f64;
            let no_variation = set.traces.iter().filter(|t| t.unique_answers() <= 1).count() as f64 / n;
            Ok(TemperaturePoint {
                temperature: set.metadata.temperature,
                budget_auc: budget_auc(&grid, &curve.accuracy)?,
                relative_index: 0.0,
                no_variation_fraction: no_variation,
                always_correct_fraction: recoverability_table(&set.traces).always_correct,
                mean_accuracy: mean(&acc),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| a.temperature.total_cmp(&b.temperature));
    let lo = points.iter().map(|p| p.budget_auc).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.budget_auc).fold(f64::NEG_INFINITY, f64::max);
    for p in &mut points {
        p.relative_index = if hi > lo { (p.budget_auc - lo) / (hi - lo) } else { 1.0 };
    }
    Ok(TemperatureSummary { points })
}

/// Cross-validated Spearman of a window-segment regressor for each window
/// end (tokens counted over Postilla then Generated).
pub fn growing_window_sweep(
    set: &TraceSet,
    window_ends: &[usize],
    group: FeatureGroup,
    target_kind: TargetKind,
    hp: &ForestHyperparams,
    k: usize,
) -> Result<CorrelationSeries> {
    if window_ends.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("window ends must be strictly ascending".into()));
    }
    let base = FeatureConfig::for_metadata(&set.metadata, Segment::Window, group);
    let mut series = CorrelationSeries::new("growing_window");
    for &end in window_ends {
        let cfg = base.clone().with_window(end);
        cfg.validate()?;
        let cv = cross_validate(&set.traces, &cfg, target_kind, hp, k)?;
        series.push(end, cv.spearman_vs_target);
    }
    Ok(series)
}

/// Window ends `1 ..= P + G` for a trace set.
pub fn all_window_ends(set: &TraceSet) -> Vec<usize> {
    (1..=set.metadata.postilla_token_count + DEFAULT_GENERATED_TOKENS).collect()
}
