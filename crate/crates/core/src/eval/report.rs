//! Evaluation bundle for one trace set and CSV writers for every table.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::sweeps::{TemperatureSummary, TruncationGrid};
use super::{
    budget_curve, default_budget_grid, low_accuracy_labels, oracle_ranking, random_ranking, recoverability_table,
    roc_curve, BudgetCurve, CorrelationSeries, RecoverabilityRow, RocCurve, DEFAULT_LOW_ACCURACY_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::measures::uncertainty_target;
use crate::stats::{spearman, BootstrapSettings};
use crate::trace::PromptTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationOptions {
    pub threshold: f64,
    pub budget_grid: Vec<f64>,
    pub bootstrap: BootstrapSettings,
    pub random_seed: u64,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_LOW_ACCURACY_THRESHOLD,
            budget_grid: default_budget_grid(),
            bootstrap: BootstrapSettings::default(),
            random_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingSummary {
    pub name: String,
    /// `None` when every prompt falls on one side of the threshold.
    pub roc_auc: Option<f64>,
    pub budget_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCorrelation {
    pub name: String,
    pub rho: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub prompt_count: usize,
    pub threshold: f64,
    pub low_accuracy_count: usize,
    pub mean_accuracy: f64,
    pub rankings: Vec<RankingSummary>,
    pub roc: Vec<(String, RocCurve)>,
    pub budget: Vec<BudgetCurve>,
    pub recoverability: RecoverabilityRow,
    pub correlations: Vec<NamedCorrelation>,
}

/// Scores every ranking on `traces`. `predicted` holds per-prompt
/// regressor scores in trace order, when available.
///
/// Rankings: the regressor, multi-generation PE and SE, mean perplexity,
/// the accuracy oracle and a seeded random order.
pub fn evaluate(traces: &[PromptTrace], predicted: Option<&[f64]>, opts: &EvaluationOptions) -> Result<EvaluationReport> {
    if traces.is_empty() {
        return Err(Error::TooFewValues { needed: 1, got: 0 });
    }
    if let Some(p) = predicted {
        if p.len() != traces.len() {
            return Err(Error::LengthMismatch(p.len(), traces.len()));
        }
    }
    let targets = traces.iter().map(uncertainty_target).collect::<Result<Vec<_>>>()?;
    let accuracies: Vec<f64> = traces.iter().map(crate::trace::answer_accuracy).collect();
    let labels = low_accuracy_labels(&accuracies, opts.threshold);
    let pe: Vec<f64> = targets.iter().map(|t| t.pe_norm).collect();
    let se: Vec<f64> = targets.iter().map(|t| t.se_norm).collect();
    let pp: Vec<f64> = targets.iter().map(|t| t.mean_perplexity()).collect();

    let mut rankings: Vec<(&str, Vec<f64>, bool)> = Vec::new();
    if let Some(p) = predicted {
        rankings.push(("regressor", p.to_vec(), true));
    }
    rankings.push(("pe", pe.clone(), true));
    rankings.push(("se", se.clone(), true));
    rankings.push(("perplexity", pp.clone(), true));
    rankings.push(("oracle", oracle_ranking(&accuracies), false));
    rankings.push(("random", random_ranking(opts.random_seed, traces.len()), false));

    let mut summaries = Vec::new();
    let mut roc = Vec::new();
    let mut budget = Vec::new();
    for (name, scores, with_roc) in &rankings {
        let curve = budget_curve(name, scores, &accuracies, &opts.budget_grid, Some(opts.bootstrap))?;
        let roc_auc = if *with_roc {
            match roc_curve(scores, &labels) {
                Ok(r) => {
                    let auc = r.auc;
                    roc.push((name.to_string(), r));
                    Some(auc)
                }
                Err(Error::SingleClass) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        summaries.push(RankingSummary {
            name: name.to_string(),
            roc_auc,
            budget_auc: curve.auc()?,
        });
        budget.push(curve);
    }

    let mut correlations = Vec::new();
    let mut corr = |name: &str, a: &[f64], b: &[f64]| -> Result<()> {
        let c = if a.len() < 2 {
            crate::stats::Correlation::DEGENERATE
        } else {
            spearman(a, b)?
        };
        correlations.push(NamedCorrelation {
            name: name.to_owned(),
            rho: c.rho,
            degenerate: c.degenerate,
        });
        Ok(())
    };
    if let Some(p) = predicted {
        corr("regressor_vs_pe", p, &pe)?;
        corr("regressor_vs_se", p, &se)?;
    }
    corr("perplexity_vs_pe", &pp, &pe)?;
    corr("se_vs_pe", &se, &pe)?;

    Ok(EvaluationReport {
        prompt_count: traces.len(),
        threshold: opts.threshold,
        low_accuracy_count: labels.iter().filter(|&&l| l).count(),
        mean_accuracy: super::dataset_accuracy(&accuracies),
        rankings: summaries,
        roc,
        budget,
        recoverability: recoverability_table(traces),
        correlations,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_roc_csv<W: Write>(w: W, curves: &[(String, RocCurve)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["ranking", "fpr", "tpr", "threshold"])?;
    for (name, c) in curves {
        for p in &c.points {
            out.write_record([name.clone(), p.fpr.to_string(), p.tpr.to_string(), opt(p.threshold)])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_budget_csv<W: Write>(w: W, curves: &[BudgetCurve]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["ranking", "budget", "accuracy", "ci_low", "ci_high"])?;
    for c in curves {
        for (i, (b, a)) in c.grid.iter().zip(&c.accuracy).enumerate() {
            out.write_record([
                c.ranking_name.clone(),
                b.to_string(),
                a.to_string(),
                opt(c.ci_low.get(i).copied()),
                opt(c.ci_high.get(i).copied()),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_rankings_csv<W: Write>(w: W, rankings: &[RankingSummary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["ranking", "roc_auc", "budget_auc"])?;
    for r in rankings {
        out.write_record([r.name.clone(), opt(r.roc_auc), r.budget_auc.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_recoverability_csv<W: Write>(w: W, row: &RecoverabilityRow) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.serialize(row)?;
    out.flush()?;
    Ok(())
}

pub fn write_correlations_csv<W: Write>(w: W, rows: &[NamedCorrelation]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_series_csv<W: Write>(w: W, series: &CorrelationSeries) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["series", "x", "rho", "degenerate"])?;
    for i in 0..series.x.len() {
        out.write_record([
            series.name.clone(),
            series.x[i].to_string(),
            series.rho[i].to_string(),
            series.degenerate[i].to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_truncation_csv<W: Write>(w: W, grid: &TruncationGrid) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["generations", "token_cap", "rho", "degenerate"])?;
    for c in &grid.cells {
        out.write_record([
            c.generations.to_string(),
            c.token_cap.map(|k| k.to_string()).unwrap_or_else(|| "all".into()),
            c.rho.to_string(),
            c.degenerate.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_temperature_csv<W: Write>(w: W, summary: &TemperatureSummary) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in &summary.points {
        out.serialize(p)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_traces, SyntheticSpec};

    #[test]
    fn report_covers_every_ranking() {
        let set = generate_traces(&SyntheticSpec {
            n_prompts: 80,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let opts = EvaluationOptions {
            bootstrap: BootstrapSettings {
                resamples: 50,
                ..Default::default()
            },
            ..Default::default()
        };
        let r = evaluate(&set.traces, None, &opts).unwrap();
        let names: Vec<&str> = r.rankings.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["pe", "se", "perplexity", "oracle", "random"]);
        let auc = |n: &str| r.rankings.iter().find(|s| s.name == n).unwrap().budget_auc;
        assert!(auc("oracle") >= auc("pe") && auc("pe") >= auc("random"));
        let rec = &r.recoverability;
        let total = rec.always_correct + rec.never_correct_no_unc + rec.never_correct_with_unc + rec.sometimes_correct;
        assert!((total - 1.0).abs() < 1e-9);

        let mut buf = Vec::new();
        write_budget_csv(&mut buf, &r.budget).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 5 * 101);
    }

    #[test]
    fn recoverability_counting() {
        use crate::trace::{GenerationRecord, PromptTrace};
        let base = generate_traces(&SyntheticSpec {
            n_prompts: 1,
            n_generations: 2,
            ..Default::default()
        })
        .unwrap()
        .traces
        .remove(0);
        let gold = base
            .prompt
            .candidates
            .iter()
            .find(|c| c.entity_id == base.prompt.gold_entity_id)
            .unwrap()
            .render();
        let wrong = base
            .prompt
            .candidates
            .iter()
            .find(|c| c.entity_id != base.prompt.gold_entity_id)
            .unwrap()
            .render();
        let with_answers = |a: &[&str]| PromptTrace {
            generations: a
                .iter()
                .enumerate()
                .map(|(i, s)| GenerationRecord {
                    gen_index: i,
                    answer_text: s.to_string(),
                    ..base.generations[0].clone()
                })
                .collect(),
            ..base.clone()
        };
        let mut traces = Vec::new();
        traces.extend((0..2).map(|_| with_answers(&[&gold, &gold])));
        traces.push(with_answers(&[&wrong, &wrong]));
        traces.extend((0..3).map(|_| with_answers(&[&wrong, "no idea"])));
        traces.extend((0..4).map(|_| with_answers(&[&gold, &wrong])));
        let row = recoverability_table(&traces);
        assert_eq!(
            [row.always_correct, row.never_correct_no_unc, row.never_correct_with_unc, row.sometimes_correct],
            [0.2, 0.1, 0.3, 0.4]
        );
        assert!((row.recoverable_total - 0.7).abs() < 1e-12);
    }
}
