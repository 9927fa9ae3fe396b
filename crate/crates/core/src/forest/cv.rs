//! Grouped k-fold cross-validation with out-of-fold scoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_forest, Dataset, ForestHyperparams, ForestModel};
use crate::error::{Error, Result};
use crate::features::{build_training_pairs, FeatureConfig, TrainingPair};
use crate::measures::TargetKind;
use crate::stats::{derive_seed, mean, spearman, stream_rng, Correlation};
use crate::trace::PromptTrace;

/// RNG stream reserved for fold shuffling; fold models use streams `0..k`.
const SHUFFLE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvGrouping {
    #[default]
    Grouped,
    /// Rows are dealt to folds individually. Leaks prompts across folds;
    /// kept only to measure what grouping protects against.
    Ungrouped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, prompt_id: &str) -> Option<usize> {
        self.folds.get(prompt_id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

fn check_k(k: usize, groups: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > groups {
        return Err(Error::TooFewGroups { groups, folds: k });
    }
    Ok(())
}

/// Shuffles the distinct prompt ids by `seed` and deals them round-robin.
pub fn grouped_kfold<S: AsRef<str>>(prompt_ids: &[S], k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut seen = BTreeSet::new();
    let mut unique: Vec<&str> = Vec::new();
    for id in prompt_ids {
        if seen.insert(id.as_ref()) {
            unique.push(id.as_ref());
        }
    }
    check_k(k, unique.len())?;
    unique.shuffle(&mut stream_rng(seed, SHUFFLE_STREAM));
    let folds = unique
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_owned(), i % k))
        .collect();
    Ok(FoldAssignment { k, folds })
}

/// Fails if any prompt's rows landed in more than one fold.
pub fn verify_group_integrity<S: AsRef<str>>(row_prompts: &[S], row_folds: &[usize]) -> Result<()> {
    if row_prompts.len() != row_folds.len() {
        return Err(Error::LengthMismatch(row_prompts.len(), row_folds.len()));
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (p, &f) in row_prompts.iter().zip(row_folds) {
        match seen.insert(p.as_ref(), f) {
            Some(prev) if prev != f => {
                return Err(Error::GroupLeakage(format!(
                    "prompt {} appears in folds {prev} and {f}",
                    p.as_ref()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub k: usize,
    pub seed: u64,
    pub grouping: CvGrouping,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            k: 10,
            seed: 0,
            grouping: CvGrouping::Grouped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationScore {
    pub prompt_id: String,
    pub gen_index: usize,
    pub fold: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub prompt_id: String,
    /// `None` under ungrouped folds, where a prompt spans several folds.
    pub fold: Option<usize>,
    pub target: f64,
    /// Mean of the prompt's out-of-fold generation scores.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub k: usize,
    pub grouping: CvGrouping,
    /// Empty under ungrouped folds.
    pub fold_assignments: BTreeMap<String, usize>,
    pub per_generation_oof: Vec<GenerationScore>,
    /// One entry per prompt, in first-appearance order.
    pub per_prompt_oof_mean: Vec<PromptScore>,
    pub mse: f64,
    pub spearman_vs_target: Correlation,
    /// Per-prompt Spearman within each validation fold (grouped mode only).
    pub fold_spearman: Vec<Correlation>,
}

impl CvResult {
    pub fn mean_fold_spearman(&self) -> f64 {
        mean(&self.fold_spearman.iter().map(|c| c.rho).collect::<Vec<_>>())
    }

    pub fn prompt_scores(&self) -> Vec<f64> {
        self.per_prompt_oof_mean.iter().map(|p| p.score).collect()
    }
}

/// Fits the model for `fold` on `train_rows`, which are used in the order given.
pub fn fit_fold(data: &Dataset, train_rows: &[usize], hp: &ForestHyperparams, fold: usize) -> Result<ForestModel> {
    fit_forest(&data.subset(train_rows), &hp.with_seed(derive_seed(hp.seed, fold as u64)))
}

/// Per-prompt view of row-level data: prompt order and each prompt's rows.
pub(crate) struct PromptIndex {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<usize>>,
    pub row_prompt: Vec<usize>,
}

impl PromptIndex {
    pub fn new(pairs: &[TrainingPair]) -> Self {
        let mut pos: HashMap<&str, usize> = HashMap::new();
        let mut ids = Vec::new();
        let mut rows: Vec<Vec<usize>> = Vec::new();
        let mut row_prompt = Vec::with_capacity(pairs.len());
        for (r, p) in pairs.iter().enumerate() {
            let id = p.features.prompt_id.as_str();
            let i = *pos.entry(id).or_insert_with(|| {
                ids.push(id.to_owned());
                rows.push(Vec::new());
                ids.len() - 1
            });
            rows[i].push(r);
            row_prompt.push(i);
        }
        Self { ids, rows, row_prompt }
    }
}

fn row_folds(pairs: &[TrainingPair], index: &PromptIndex, opts: &CvOptions) -> Result<(Vec<usize>, BTreeMap<String, usize>)> {
    match opts.grouping {
        CvGrouping::Grouped => {
            let assignment = grouped_kfold(&index.ids, opts.k, opts.seed)?;
            let folds = pairs
                .iter()
                .map(|p| assignment.folds[&p.features.prompt_id])
                .collect();
            Ok((folds, assignment.folds))
        }
        CvGrouping::Ungrouped => {
            check_k(opts.k, pairs.len())?;
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut stream_rng(opts.seed, SHUFFLE_STREAM));
            let mut folds = vec![0; pairs.len()];
            for (i, r) in order.into_iter().enumerate() {
                folds[r] = i % opts.k;
            }
            Ok((folds, BTreeMap::new()))
        }
    }
}

/// Checks that no validation prompt of any fold also occurs in its training rows.
fn check_fold_disjointness(index: &PromptIndex, folds: &[usize], k: usize) -> Result<()> {
    for f in 0..k {
        let val: BTreeSet<usize> = (0..folds.len())
            .filter(|&r| folds[r] == f)
            .map(|r| index.row_prompt[r])
            .collect();
        if let Some(r) = (0..folds.len()).find(|&r| folds[r] != f && val.contains(&index.row_prompt[r])) {
            return Err(Error::GroupLeakage(format!(
                "prompt {} is in both training and validation of fold {f}",
                index.ids[index.row_prompt[r]]
            )));
        }
    }
    Ok(())
}

pub fn cross_validate_pairs(pairs: &[TrainingPair], hp: &ForestHyperparams, opts: &CvOptions) -> Result<CvResult> {
    let data = Dataset::from_pairs(pairs)?;
    let index = PromptIndex::new(pairs);
    let (folds, fold_assignments) = row_folds(pairs, &index, opts)?;
    if opts.grouping == CvGrouping::Grouped {
        let prompts: Vec<&str> = pairs.iter().map(|p| p.features.prompt_id.as_str()).collect();
        verify_group_integrity(&prompts, &folds)?;
        check_fold_disjointness(&index, &folds, opts.k)?;
    }

    let fold_predictions: Vec<Vec<(usize, f64)>> = (0..opts.k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..pairs.len()).filter(|&r| folds[r] != f).collect();
            let model = fit_fold(&data, &train, hp, f)?;
            (0..pairs.len())
                .filter(|&r| folds[r] == f)
                .map(|r| Ok((r, model.predict_values(data.row(r))?)))
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut scores = vec![f64::NAN; pairs.len()];
    for (r, s) in fold_predictions.into_iter().flatten() {
        scores[r] = s;
    }
    let per_generation_oof = pairs
        .iter()
        .enumerate()
        .map(|(r, p)| GenerationScore {
            prompt_id: p.features.prompt_id.clone(),
            gen_index: p.features.gen_index,
            fold: folds[r],
            score: scores[r],
        })
        .collect();

    let grouped = opts.grouping == CvGrouping::Grouped;
    let per_prompt_oof_mean: Vec<PromptScore> = index
        .ids
        .iter()
        .zip(&index.rows)
        .map(|(id, rows)| PromptScore {
            prompt_id: id.clone(),
            fold: grouped.then(|| folds[rows[0]]),
            target: pairs[rows[0]].target,
            score: mean(&rows.iter().map(|&r| scores[r]).collect::<Vec<_>>()),
        })
        .collect();

    let (mse, spearman_vs_target) = score_prompts(&per_prompt_oof_mean)?;
    let fold_spearman = if grouped {
        (0..opts.k)
            .map(|f| {
                let in_fold: Vec<PromptScore> = per_prompt_oof_mean
                    .iter()
                    .filter(|p| p.fold == Some(f))
                    .cloned()
                    .collect();
                fold_correlation(&in_fold)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    Ok(CvResult {
        k: opts.k,
        grouping: opts.grouping,
        fold_assignments,
        per_generation_oof,
        per_prompt_oof_mean,
        mse,
        spearman_vs_target,
        fold_spearman,
    })
}

/// Spearman of a validation fold; a one-prompt fold counts as degenerate.
pub(crate) fn fold_correlation(prompts: &[PromptScore]) -> Result<Correlation> {
    if prompts.len() < 2 {
        return Ok(Correlation::DEGENERATE);
    }
    let s: Vec<f64> = prompts.iter().map(|p| p.score).collect();
    let t: Vec<f64> = prompts.iter().map(|p| p.target).collect();
    spearman(&s, &t)
}

fn score_prompts(prompts: &[PromptScore]) -> Result<(f64, Correlation)> {
    let mse = prompts.iter().map(|p| (p.score - p.target).powi(2)).sum::<f64>() / prompts.len() as f64;
    Ok((mse, fold_correlation(prompts)?))
}

/// Builds training pairs from `traces` and runs grouped k-fold CV seeded by `hp.seed`.
pub fn cross_validate(
    traces: &[PromptTrace],
    cfg: &FeatureConfig,
    target_kind: TargetKind,
    hp: &ForestHyperparams,
    k: usize,
) -> Result<CvResult> {
    let pairs = build_training_pairs(traces, cfg, target_kind)?;
    let opts = CvOptions {
        k,
        seed: hp.seed,
        grouping: CvGrouping::Grouped,
    };
    cross_validate_pairs(&pairs, hp, &opts)
}
