//! One function per subcommand. Each builds a [`Bundle`] in memory; the
//! caller decides where (and whether) to write it.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::Serialize;
use uqlink::eval::report::{
    write_budget_csv, write_correlations_csv, write_rankings_csv, write_recoverability_csv, write_roc_csv,
    write_series_csv, write_temperature_csv, write_truncation_csv,
};
use uqlink::eval::{
    evaluate, growing_window_sweep, low_accuracy_labels, progressive_training, roc_curve, temperature_summary,
    truncated_pe_grid, EvaluationOptions,
};
use uqlink::features::{assemble_features, build_training_pairs, write_feature_csv, FeatureConfig, FeatureVector};
use uqlink::forest::{
    cross_validate_pairs, fit_forest, predict_many, CvGrouping, CvOptions, CvResult, Dataset, ForestModel,
    TrainingManifest,
};
use uqlink::measures::uncertainty_target;
use uqlink::synth::generate_traces;
use uqlink::trace::{
    answer_accuracy, dataset_from_traces, load_traces, validate_trace_set, write_traces_to, TraceSet, ValidationReport,
};

use crate::bundle::Bundle;
use crate::config::{RunConfig, ScoreMode};

/// A command's products: files to write and a short line for stdout.
#[derive(Debug)]
pub struct Outcome {
    pub bundle: Bundle,
    pub summary: String,
    /// Non-zero exit requested even though outputs are valid (e.g. violations found).
    pub failed: bool,
}

impl Outcome {
    fn ok(bundle: Bundle, summary: String) -> Self {
        Self {
            bundle,
            summary,
            failed: false,
        }
    }
}

fn is_trace_file(p: &Path) -> bool {
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.ends_with(".jsonl") || name.ends_with(".jsonl.gz")
}

/// Expands directories into their trace files, sorted by name.
fn trace_paths(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    if cfg.traces.is_empty() {
        bail!("no trace input given (use --traces)");
    }
    let mut out = Vec::new();
    for p in &cfg.traces {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            files.retain(|f| is_trace_file(f));
            files.sort();
            if files.is_empty() {
                bail!("directory {} holds no .jsonl trace files", p.display());
            }
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_checked(path: &Path, bundle: &mut Bundle) -> anyhow::Result<TraceSet> {
    let set = load_traces(path).with_context(|| format!("loading {}", path.display()))?;
    bundle.record_input_hash(path, set.content_hash());
    let report = validate_trace_set(&set);
    if !report.is_clean() {
        let first = &report.violations[0];
        bail!(
            "{} fails validation with {} violation(s); first: {}{}",
            path.display(),
            report.violations.len(),
            first.prompt_id.as_deref().map(|p| format!("[{p}] ")).unwrap_or_default(),
            first.message
        );
    }
    Ok(set)
}

fn single_trace_set(cfg: &RunConfig, bundle: &mut Bundle) -> anyhow::Result<TraceSet> {
    let paths = trace_paths(cfg)?;
    if paths.len() != 1 {
        bail!("{} expects exactly one trace file, got {}", cfg.command, paths.len());
    }
    load_checked(&paths[0], bundle)
}

fn csv_bytes<F>(write: F) -> anyhow::Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        write(&mut w)?;
        w.flush()?;
    }
    Ok(buf)
}

pub fn cmd_synth(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let set = generate_traces(&cfg.synth)?;
    let mut bundle = Bundle::default();
    bundle.add_with("traces.jsonl", |w| write_traces_to(w, &set))?;
    let mut dataset = Vec::new();
    for r in dataset_from_traces(&set) {
        serde_json::to_writer(&mut dataset, &r)?;
        dataset.push(b'\n');
    }
    bundle.add("dataset.jsonl", dataset);
    bundle.add_json("synth_spec.json", &cfg.synth)?;
    let summary = format!(
        "generated {} prompts x {} generations",
        set.traces.len(),
        set.metadata.n_generations
    );
    Ok(Outcome::ok(bundle, summary))
}

#[derive(Serialize)]
struct ValidationFile<'a> {
    path: String,
    prompt_count: usize,
    clean: bool,
    report: &'a ValidationReport,
}

pub fn cmd_validate(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let mut bundle = Bundle::default();
    let mut total = 0;
    let mut files = Vec::new();
    for path in trace_paths(cfg)? {
        let set = load_traces(&path).with_context(|| format!("loading {}", path.display()))?;
        bundle.record_input_hash(&path, set.content_hash());
        let report = validate_trace_set(&set);
        total += report.violations.len();
        files.push((path, set.traces.len(), report));
    }
    let body: Vec<ValidationFile> = files
        .iter()
        .map(|(p, n, r)| ValidationFile {
            path: p.display().to_string(),
            prompt_count: *n,
            clean: r.is_clean(),
            report: r,
        })
        .collect();
    bundle.add_json("validation.json", &body)?;
    Ok(Outcome {
        bundle,
        summary: format!("{} file(s), {total} violation(s)", files.len()),
        failed: total > 0,
    })
}

pub fn cmd_targets(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let mut bundle = Bundle::default();
    let set = single_trace_set(cfg, &mut bundle)?;
    let rows = set
        .traces
        .iter()
        .map(|t| Ok((t, uncertainty_target(t)?, answer_accuracy(t))))
        .collect::<uqlink::Result<Vec<_>>>()?;
    let bytes = csv_bytes(|w| {
        w.write_record([
            "prompt_id",
            "pe_raw",
            "pe_norm",
            "se_raw",
            "se_norm",
            "mean_perplexity",
            "unique_answers",
            "unique_classes",
            "accuracy",
        ])?;
        for (t, u, acc) in &rows {
            w.write_record([
                t.prompt_id().to_owned(),
                u.pe_raw.to_string(),
                u.pe_norm.to_string(),
                u.se_raw.to_string(),
                u.se_norm.to_string(),
                u.mean_perplexity().to_string(),
                u.unique_answers.to_string(),
                u.unique_classes.to_string(),
                acc.to_string(),
            ])?;
        }
        Ok(())
    })?;
    bundle.add("targets.csv", bytes);
    let fcfg = cfg.features.config_for(&set.metadata);
    let pairs = build_training_pairs(&set.traces, &fcfg, cfg.target)?;
    bundle.add_with("features.csv", |w| write_feature_csv(w, &fcfg, &pairs))?;
    Ok(Outcome::ok(bundle, format!("targets for {} prompts", rows.len())))
}

fn train_model(cfg: &RunConfig, set: &TraceSet, fcfg: &FeatureConfig) -> anyhow::Result<ForestModel> {
    let pairs = build_training_pairs(&set.traces, fcfg, cfg.target)?;
    let data = Dataset::from_pairs(&pairs)?;
    let mut model = fit_forest(&data, &cfg.forest)?;
    model.target_kind = Some(cfg.target);
    model.training_manifest = TrainingManifest {
        trace_set_hash: Some(set.content_hash()),
        pair_count: pairs.len(),
        prompt_count: set.traces.len(),
    };
    Ok(model)
}

#[derive(Serialize)]
struct CvSummary<'a> {
    k: usize,
    grouping: CvGrouping,
    prompt_count: usize,
    mse: f64,
    spearman_vs_target: f64,
    spearman_degenerate: bool,
    mean_fold_spearman: f64,
    feature_config: &'a FeatureConfig,
}

fn run_cv(cfg: &RunConfig, set: &TraceSet, fcfg: &FeatureConfig) -> anyhow::Result<CvResult> {
    let pairs = build_training_pairs(&set.traces, fcfg, cfg.target)?;
    let opts = CvOptions {
        k: cfg.evaluation.k,
        seed: cfg.seed,
        grouping: CvGrouping::Grouped,
    };
    Ok(cross_validate_pairs(&pairs, &cfg.forest, &opts)?)
}

fn add_cv(bundle: &mut Bundle, cv: &CvResult, fcfg: &FeatureConfig) -> anyhow::Result<()> {
    bundle.add_json(
        "cv_summary.json",
        &CvSummary {
            k: cv.k,
            grouping: cv.grouping,
            prompt_count: cv.per_prompt_oof_mean.len(),
            mse: cv.mse,
            spearman_vs_target: cv.spearman_vs_target.rho,
            spearman_degenerate: cv.spearman_vs_target.degenerate,
            mean_fold_spearman: cv.mean_fold_spearman(),
            feature_config: fcfg,
        },
    )?;
    let bytes = csv_bytes(|w| {
        w.write_record(["prompt_id", "fold", "target", "score"])?;
        for p in &cv.per_prompt_oof_mean {
            w.write_record([
                p.prompt_id.clone(),
                p.fold.map(|f| f.to_string()).unwrap_or_default(),
                p.target.to_string(),
                p.score.to_string(),
            ])?;
        }
        Ok(())
    })?;
    bundle.add("cv_prompt_scores.csv", bytes);
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, with_cv: bool) -> anyhow::Result<Outcome> {
    let mut bundle = Bundle::default();
    let set = single_trace_set(cfg, &mut bundle)?;
    let fcfg = cfg.features.config_for(&set.metadata);
    fcfg.validate()?;
    let model = train_model(cfg, &set, &fcfg)?;
    bundle.add("model.json", model.to_json()?);
    bundle.add_json("feature_config.json", &fcfg)?;
    let mut summary = format!(
        "trained {} trees on {} pairs ({} features)",
        model.trees.len(),
        model.training_manifest.pair_count,
        model.feature_count
    );
    if with_cv {
        let cv = run_cv(cfg, &set, &fcfg)?;
        summary.push_str(&format!(
            "; {}-fold CV spearman {:.4}",
            cv.k, cv.spearman_vs_target.rho
        ));
        add_cv(&mut bundle, &cv, &fcfg)?;
    }
    Ok(Outcome::ok(bundle, summary))
}

/// Model, config and per-generation vectors for `set`.
fn load_model(cfg: &RunConfig, bundle: &mut Bundle) -> anyhow::Result<(ForestModel, FeatureConfig)> {
    let path = cfg.model.as_ref().ok_or_else(|| anyhow!("--model is required"))?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    bundle.record_input(path, &bytes);
    let model = ForestModel::from_json(&bytes).with_context(|| format!("loading {}", path.display()))?;
    let cfg_path = path.with_file_name("feature_config.json");
    let fcfg: FeatureConfig = if cfg_path.exists() {
        let raw = fs::read(&cfg_path)?;
        bundle.record_input(&cfg_path, &raw);
        serde_json::from_slice(&raw).with_context(|| format!("parsing {}", cfg_path.display()))?
    } else {
        bail!("{} not found next to the model", cfg_path.display());
    };
    if fcfg.digest() != model.config_digest {
        bail!("feature_config.json does not match the model's config digest");
    }
    Ok((model, fcfg))
}

struct Predictions {
    per_generation: Vec<(String, usize, f64)>,
    per_prompt: Vec<f64>,
}

fn predict_set(model: &ForestModel, fcfg: &FeatureConfig, set: &TraceSet) -> anyhow::Result<Predictions> {
    let mut vectors: Vec<FeatureVector> = Vec::new();
    for t in &set.traces {
        for g in 0..t.generations.len() {
            vectors.push(assemble_features(t, g, fcfg)?);
        }
    }
    let scores = predict_many(model, &vectors)?;
    let mut per_prompt = Vec::with_capacity(set.traces.len());
    let mut offset = 0;
    for t in &set.traces {
        let n = t.generations.len();
        per_prompt.push(uqlink::stats::mean(&scores[offset..offset + n]));
        offset += n;
    }
    let per_generation = vectors
        .iter()
        .zip(&scores)
        .map(|(v, &s)| (v.prompt_id.clone(), v.gen_index, s))
        .collect();
    Ok(Predictions {
        per_generation,
        per_prompt,
    })
}

fn add_predictions(bundle: &mut Bundle, set: &TraceSet, p: &Predictions) -> anyhow::Result<()> {
    let gen = csv_bytes(|w| {
        w.write_record(["prompt_id", "gen_index", "score"])?;
        for (id, g, s) in &p.per_generation {
            w.write_record([id.clone(), g.to_string(), s.to_string()])?;
        }
        Ok(())
    })?;
    bundle.add("generation_scores.csv", gen);
    bundle.add("prompt_scores.csv", prompt_scores_csv(set, &p.per_prompt)?);
    Ok(())
}

fn prompt_scores_csv(set: &TraceSet, scores: &[f64]) -> anyhow::Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["prompt_id", "score"])?;
        for (t, s) in set.traces.iter().zip(scores) {
            w.write_record([t.prompt_id().to_owned(), s.to_string()])?;
        }
        Ok(())
    })
}

pub fn cmd_predict(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let mut bundle = Bundle::default();
    let (model, fcfg) = load_model(cfg, &mut bundle)?;
    let set = single_trace_set(cfg, &mut bundle)?;
    let preds = predict_set(&model, &fcfg, &set)?;
    add_predictions(&mut bundle, &set, &preds)?;
    let summary = format!("scored {} generations of {} prompts", preds.per_generation.len(), set.traces.len());
    Ok(Outcome::ok(bundle, summary))
}

/// Per-prompt scores from a `prompt_id,score` CSV, in trace order.
fn read_scores(path: &Path, set: &TraceSet, bundle: &mut Bundle) -> anyhow::Result<Vec<f64>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    bundle.record_input(path, &bytes);
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{} has no {name} column", path.display()))
    };
    let (id_col, score_col) = (col("prompt_id")?, col("score")?);
    let mut by_id = HashMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let score: f64 = rec[score_col]
            .parse()
            .with_context(|| format!("bad score {:?} in {}", &rec[score_col], path.display()))?;
        by_id.insert(rec[id_col].to_owned(), score);
    }
    set.traces
        .iter()
        .map(|t| {
            by_id
                .get(t.prompt_id())
                .copied()
                .ok_or_else(|| anyhow!("{} has no score for prompt {}", path.display(), t.prompt_id()))
        })
        .collect()
}

pub fn cmd_evaluate(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let mut bundle = Bundle::default();
    let model = match &cfg.model {
        Some(_) => Some(load_model(cfg, &mut bundle)?),
        None => None,
    };
    let set = single_trace_set(cfg, &mut bundle)?;
    let fcfg = match &model {
        Some((_, f)) => f.clone(),
        None => cfg.features.config_for(&set.metadata),
    };

    // Scores: explicit file, held-out model predictions, or out-of-fold CV.
    let mut generation_scores: Option<Vec<f64>> = None;
    let (scores, source) = if let Some(path) = &cfg.scores {
        (read_scores(path, &set, &mut bundle)?, "scores file")
    } else if let Some((m, f)) = &model {
        let p = predict_set(m, f, &set)?;
        generation_scores = Some(p.per_generation.iter().map(|g| g.2).collect());
        (p.per_prompt, "model")
    } else {
        let cv = run_cv(cfg, &set, &fcfg)?;
        add_cv(&mut bundle, &cv, &fcfg)?;
        generation_scores = Some(cv.per_generation_oof.iter().map(|g| g.score).collect());
        (cv.prompt_scores(), "cross-validation")
    };

    let opts = EvaluationOptions {
        threshold: cfg.evaluation.threshold,
        budget_grid: cfg.budget_grid()?,
        bootstrap: cfg.bootstrap(),
        random_seed: cfg.seed,
    };
    let mut report = evaluate(&set.traces, Some(&scores), &opts)?;
    if cfg.evaluation.score_mode == ScoreMode::PerGeneration {
        let gen = generation_scores
            .ok_or_else(|| anyhow!("per-generation scoring needs a model or cross-validation, not a scores file"))?;
        let labels: Vec<bool> = set
            .traces
            .iter()
            .zip(low_accuracy_labels(&set.accuracies(), opts.threshold))
            .flat_map(|(t, l)| std::iter::repeat_n(l, t.generations.len()))
            .collect();
        if let Ok(curve) = roc_curve(&gen, &labels) {
            report.roc.push(("regressor_per_generation".into(), curve));
        }
    }

    bundle.add("prompt_scores.csv", prompt_scores_csv(&set, &scores)?);
    bundle.add_json("report.json", &report)?;
    bundle.add_with("roc.csv", |w| write_roc_csv(w, &report.roc))?;
    bundle.add_with("budget.csv", |w| write_budget_csv(w, &report.budget))?;
    bundle.add_with("rankings.csv", |w| write_rankings_csv(w, &report.rankings))?;
    bundle.add_with("recoverability.csv", |w| write_recoverability_csv(w, &report.recoverability))?;
    bundle.add_with("correlations.csv", |w| write_correlations_csv(w, &report.correlations))?;

    let reg = &report.rankings[0];
    let summary = format!(
        "evaluated {} prompts with {source} scores: ROC AUC {}, budget AUC {:.4}",
        report.prompt_count,
        reg.roc_auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into()),
        reg.budget_auc
    );
    Ok(Outcome::ok(bundle, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    Temperature,
    Window,
    Truncation,
    Progressive,
}

pub fn cmd_sweep(cfg: &RunConfig, kind: SweepKind) -> anyhow::Result<Outcome> {
    let mut bundle = Bundle::default();
    let summary = match kind {
        SweepKind::Temperature => {
            let sets = trace_paths(cfg)?
                .iter()
                .map(|p| load_checked(p, &mut bundle))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let summary = temperature_summary(&sets)?;
            bundle.add_json("temperature.json", &summary)?;
            bundle.add_with("temperature.csv", |w| write_temperature_csv(w, &summary))?;
            format!("temperature sweep over {} trace sets", sets.len())
        }
        SweepKind::Truncation => {
            let set = single_trace_set(cfg, &mut bundle)?;
            let mut caps: Vec<Option<usize>> = cfg.sweep.token_caps.iter().map(|&k| Some(k)).collect();
            caps.push(None);
            let n = set.metadata.n_generations;
            let gens: Vec<usize> = cfg.sweep.generation_counts.iter().copied().filter(|&m| m <= n).collect();
            let grid = truncated_pe_grid(&set.traces, &gens, &caps)?;
            bundle.add_json("truncation.json", &grid)?;
            bundle.add_with("truncation.csv", |w| write_truncation_csv(w, &grid))?;
            format!("truncation grid {} x {}", gens.len(), caps.len())
        }
        SweepKind::Progressive => {
            let set = single_trace_set(cfg, &mut bundle)?;
            let fcfg = cfg.features.config_for(&set.metadata);
            let k = cfg.evaluation.k;
            let sizes = if cfg.sweep.sizes.is_empty() {
                let smallest_train = set.traces.len() - set.traces.len().div_ceil(k);
                let mut s: Vec<usize> = (1..=10).map(|i| (smallest_train * i / 10).max(1)).collect();
                s.dedup();
                s
            } else {
                cfg.sweep.sizes.clone()
            };
            let series = progressive_training(&set.traces, &fcfg, cfg.target, &cfg.forest, &sizes, k)?;
            bundle.add_json("progressive.json", &series)?;
            bundle.add_with("progressive.csv", |w| write_series_csv(w, &series))?;
            format!("progressive training over {} sizes", sizes.len())
        }
        SweepKind::Window => {
            let set = single_trace_set(cfg, &mut bundle)?;
            let ends = if cfg.sweep.window_ends.is_empty() {
                (1..=set.metadata.postilla_token_count + cfg.features.generated_token_count).collect()
            } else {
                cfg.sweep.window_ends.clone()
            };
            let series = growing_window_sweep(
                &set,
                &ends,
                cfg.features.group,
                cfg.target,
                &cfg.forest,
                cfg.evaluation.k,
            )?;
            bundle.add_json("window.json", &series)?;
            bundle.add_with("window.csv", |w| write_series_csv(w, &series))?;
            format!("growing-window sweep over {} ends", ends.len())
        }
    };
    Ok(Outcome::ok(bundle, summary))
}
