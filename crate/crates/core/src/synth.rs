//! Synthetic trace sets with known ground truth, and the naive reference
//! implementations the optimized code paths are tested against.
//!
//! Each prompt gets a class distribution over its candidates. Answers are
//! sampled from it (with optional surface paraphrases and off-list
//! answers), the realized normalized entropy is computed, and every token
//! observable is an affine function of that entropy plus Gaussian noise.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{answer_distribution, predictive_entropy, semantic_distribution, semantic_entropy, TargetKind};
use crate::stats::stream_rng;
use crate::trace::{
    CandidateEntity, GenerationRecord, MentionColumn, PromptInstance, PromptTrace, SegmentName, TokenObservables,
    TokenSpan, TraceMetadata, TraceSet, FORMAT_VERSION,
};

/// How each prompt's class probabilities are chosen. Class 0 is the gold
/// candidate; its position in the candidate list is shuffled afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerModel {
    /// A fraction of prompts is deterministic (right with probability
    /// `deterministic_correct`); the rest draw a difficulty `d ~ U(0,1)` that
    /// moves gold mass from 1 towards the uniform share.
    Difficulty {
        deterministic_fraction: f64,
        deterministic_correct: f64,
    },
    /// Every prompt uses these probabilities, gold first.
    Fixed { probs: Vec<f64> },
}

impl Default for AnswerModel {
    fn default() -> Self {
        AnswerModel::Difficulty {
            deterministic_fraction: 0.2,
            deterministic_correct: 0.85,
        }
    }
}

/// Maps the realized target `u` to token observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureModel {
    /// Gaussian noise added to each observable.
    pub noise_sigma: f64,
    /// When false, Postilla observables follow an uninformative per-prompt decoy.
    pub signal_in_postilla: bool,
    /// When false, generated-token observables follow the decoy.
    pub signal_in_generated: bool,
    pub signal_target: TargetKind,
}

impl Default for FeatureModel {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            signal_in_postilla: true,
            signal_in_generated: true,
            signal_target: TargetKind::Pe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_prompts: usize,
    #[serde(rename = "N")]
    pub n_generations: usize,
    pub candidate_count: usize,
    pub answer_model: AnswerModel,
    /// Probability that an answer is a surface variant of its class.
    pub paraphrase_rate: f64,
    /// Probability that an answer names no candidate.
    pub off_list_rate: f64,
    pub feature_model: FeatureModel,
    /// Characters per generated token when splitting answers.
    pub chars_per_token: usize,
    pub layer_count: usize,
    pub postilla_token_count: usize,
    pub vocab_size: u64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_prompts: 1000,
            n_generations: 10,
            candidate_count: 5,
            answer_model: AnswerModel::default(),
            paraphrase_rate: 0.1,
            off_list_rate: 0.02,
            feature_model: FeatureModel::default(),
            chars_per_token: 4,
            layer_count: 4,
            postilla_token_count: 8,
            vocab_size: 32_000,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.n_prompts == 0 || self.n_generations == 0 {
            return bad("n_prompts and N must be positive".into());
        }
        if self.candidate_count == 0 || self.layer_count == 0 || self.postilla_token_count == 0 {
            return bad("candidate_count, layer_count and postilla_token_count must be positive".into());
        }
        if self.chars_per_token == 0 || self.vocab_size < 2 {
            return bad("chars_per_token must be positive and vocab_size at least 2".into());
        }
        if !unit(self.paraphrase_rate) || !unit(self.off_list_rate) || self.paraphrase_rate + self.off_list_rate > 1.0 {
            return bad("paraphrase_rate and off_list_rate must be in [0, 1] with sum <= 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad(format!("temperature {} must be finite and >= 0", self.temperature));
        }
        let sigma = self.feature_model.noise_sigma;
        if !(sigma.is_finite() && sigma >= 0.0) {
            return bad(format!("noise_sigma {sigma} must be finite and >= 0"));
        }
        match &self.answer_model {
            AnswerModel::Difficulty {
                deterministic_fraction,
                deterministic_correct,
            } => {
                if !unit(*deterministic_fraction) || !unit(*deterministic_correct) {
                    return bad("deterministic fractions must be in [0, 1]".into());
                }
                if self.candidate_count < 2 && *deterministic_correct < 1.0 {
                    return bad("wrong deterministic answers need at least two candidates".into());
                }
            }
            AnswerModel::Fixed { probs } => {
                if probs.is_empty() || probs.len() > self.candidate_count {
                    return bad(format!(
                        "{} class probabilities for {} candidates",
                        probs.len(),
                        self.candidate_count
                    ));
                }
                if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad("class probabilities must be non-negative and sum to 1".into());
                }
            }
        }
        Ok(())
    }
}

const PLACES: &[&str] = &[
    "Hyde", "Marion", "Jackson", "Franklin", "Clay", "Warren", "Lincoln", "Madison", "Greene", "Wayne", "Union",
    "Monroe", "Carroll", "Polk", "Adams", "Shelby",
];
const KINDS: &[&str] = &["County", "Park", "River", "Station", "Hall", "Lake", "Bridge", "Street"];
const TYPES: &[&str] = &["county", "park", "river", "railway station", "building", "lake", "bridge", "street", "human"];
const OFF_LIST: &[&str] = &["I don't know", "None of the candidates", "unknown entity", "N/A"];

fn candidate_set(rng: &mut ChaCha8Rng, prompt: usize, count: usize) -> Vec<CandidateEntity> {
    let base = PLACES[rng.random_range(0..PLACES.len())];
    (0..count)
        .map(|j| {
            let label = format!("{base} {} {j}", KINDS[(prompt + j) % KINDS.len()]);
            let t1 = TYPES[rng.random_range(0..TYPES.len())];
            let t2 = TYPES[rng.random_range(0..TYPES.len())];
            let types: Vec<&str> = if t1 == t2 || rng.random_bool(0.5) { vec![t1] } else { vec![t1, t2] };
            let description = rng
                .random_bool(0.8)
                .then(|| format!("{} in region {}", t1, rng.random_range(1..60)));
            CandidateEntity::new(format!("Q{}", 1000 * (prompt + 1) + j), label, description.as_deref(), &types)
        })
        .collect()
}

/// Raises probabilities to `1/τ` and renormalizes; `τ = 0` keeps the mode.
fn temper(probs: &[f64], tau: f64) -> Vec<f64> {
    if tau == 0.0 {
        let best = probs
            .iter()
            .enumerate()
            .fold(0, |b, (i, &p)| if p > probs[b] { i } else { b });
        return (0..probs.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect();
    }
    if tau == 1.0 {
        return probs.to_vec();
    }
    let w: Vec<f64> = probs.iter().map(|&p| if p > 0.0 { p.powf(1.0 / tau) } else { 0.0 }).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn class_probs(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = spec.candidate_count;
    match &spec.answer_model {
        AnswerModel::Fixed { probs } => {
            let mut p = probs.clone();
            p.resize(k, 0.0);
            p
        }
        AnswerModel::Difficulty {
            deterministic_fraction,
            deterministic_correct,
        } => {
            let mut p = vec![0.0; k];
            if rng.random_bool(*deterministic_fraction) {
                let pick = if rng.random_bool(*deterministic_correct) { 0 } else { rng.random_range(1..k) };
                p[pick] = 1.0;
                return p;
            }
            let d: f64 = rng.random();
            let gold = 1.0 - d * (1.0 - 1.0 / k as f64);
            let weights: Vec<f64> = (1..k).map(|_| rng.random_range(0.5..1.5)).collect();
            let z: f64 = weights.iter().sum();
            p[0] = gold;
            for (slot, w) in p[1..].iter_mut().zip(&weights) {
                *slot = (1.0 - gold) * w / z;
            }
            p
        }
    }
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let mut x: f64 = rng.random();
    for (i, &p) in probs.iter().enumerate() {
        if x < p {
            return i;
        }
        x -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// A surface form that still extracts to the same candidate.
fn paraphrase(rendered: &str, rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..3) {
        0 => format!("Answer: {rendered}"),
        1 => rendered.to_lowercase(),
        _ => rendered.replacen("[TYPE]", "[TYPES]", 1),
    }
}

fn split_tokens(text: &str, chars_per_token: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    chars.chunks(chars_per_token).map(|c| c.iter().collect()).collect()
}

struct Observer<'a> {
    spec: &'a SyntheticSpec,
    noise: Normal<f64>,
    max_entropy: f64,
}

impl Observer<'_> {
    fn jitter(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.spec.feature_model.noise_sigma == 0.0 {
            0.0
        } else {
            self.noise.sample(rng)
        }
    }

    fn token(&self, u: f64, pos: usize, text: String, with_logprob: bool, rng: &mut ChaCha8Rng) -> TokenObservables {
        let shape = (pos % 3) as f64 * 0.01;
        let max_prob = (0.95 - 0.6 * u - shape + self.jitter(rng)).clamp(0.01, 1.0);
        let entropy = (0.2 + 3.0 * u + shape + self.jitter(rng)).clamp(0.0, self.max_entropy);
        let depth = self.spec.layer_count - 1;
        let logitlens_kl = (0..depth)
            .map(|l| {
                let remaining = (depth - l) as f64 / depth as f64;
                ((0.5 + 2.0 * u) * remaining + self.jitter(rng)).max(0.0)
            })
            .collect();
        TokenObservables {
            token_id: (text.bytes().map(u32::from).sum::<u32>() + pos as u32) % self.spec.vocab_size as u32,
            token_text: text,
            chosen_logprob: with_logprob.then(|| max_prob.ln()),
            max_prob,
            entropy,
            logitlens_kl,
        }
    }
}

fn prompt_trace(spec: &SyntheticSpec, index: usize, observer: &Observer<'_>) -> PromptTrace {
    let mut rng = stream_rng(spec.seed, index as u64);
    let mut candidates = candidate_set(&mut rng, index, spec.candidate_count);
    let probs = temper(&class_probs(spec, &mut rng), spec.temperature);
    // probs[0] belongs to the gold candidate, which is placed at `gold_pos`.
    let mut order: Vec<usize> = (0..spec.candidate_count).collect();
    order.shuffle(&mut rng);
    let gold_pos = order[0];
    let gold_entity_id = candidates[gold_pos].entity_id.clone();
    let varied = spec.temperature > 0.0;

    let answers: Vec<String> = (0..spec.n_generations)
        .map(|_| {
            let rendered = candidates[order[sample_index(&mut rng, &probs)]].render();
            let roll: f64 = rng.random();
            if varied && roll < spec.off_list_rate {
                OFF_LIST[rng.random_range(0..OFF_LIST.len())].to_owned()
            } else if varied && roll < spec.off_list_rate + spec.paraphrase_rate {
                paraphrase(&rendered, &mut rng)
            } else {
                rendered
            }
        })
        .collect();

    let prompt = PromptInstance {
        prompt_id: format!("syn-{index:06}"),
        mention_text: candidates[gold_pos].label.clone(),
        mention_row: (index % 50) as u64,
        mention_col: MentionColumn::Index((index % 4) as u64),
        table_markdown: None,
        candidates: std::mem::take(&mut candidates),
        gold_entity_id,
        segment_spans: segment_spans(spec.postilla_token_count),
    };
    let mut trace = PromptTrace {
        prompt,
        postilla_tokens: Vec::new(),
        generations: Vec::new(),
    };
    trace.generations = answers
        .into_iter()
        .enumerate()
        .map(|(gen_index, answer_text)| GenerationRecord {
            gen_index,
            answer_text,
            generated_tokens: Vec::new(),
            temperature: spec.temperature,
        })
        .collect();

    let target = realized_target(&trace, spec.feature_model.signal_target);
    let decoy: f64 = rng.random();
    let fm = &spec.feature_model;
    let u_post = if fm.signal_in_postilla { target } else { decoy };
    let u_gen = if fm.signal_in_generated { target } else { decoy };

    trace.postilla_tokens = (0..spec.postilla_token_count)
        .map(|i| observer.token(u_post, i, format!("p{i}"), false, &mut rng))
        .collect();
    for g in &mut trace.generations {
        g.generated_tokens = split_tokens(&g.answer_text, spec.chars_per_token)
            .into_iter()
            .enumerate()
            .map(|(i, text)| observer.token(u_gen, i, text, true, &mut rng))
            .collect();
    }
    trace
}

fn segment_spans(postilla: usize) -> BTreeMap<SegmentName, TokenSpan> {
    BTreeMap::from([
        (SegmentName::Instruction, TokenSpan::new(0, 40)),
        (SegmentName::Input, TokenSpan::new(40, 160)),
        (SegmentName::Question, TokenSpan::new(160, 200)),
        (SegmentName::Postilla, TokenSpan::new(200, 200 + postilla)),
    ])
}

fn realized_target(trace: &PromptTrace, kind: TargetKind) -> f64 {
    match kind {
        TargetKind::Pe => {
            let d = answer_distribution(trace.generations.iter().map(|g| g.answer_text.as_str()));
            predictive_entropy(&d).1
        }
        TargetKind::Se => semantic_entropy(&semantic_distribution(&trace.outcomes())).1,
    }
}

pub fn generate_traces(spec: &SyntheticSpec) -> Result<TraceSet> {
    spec.validate()?;
    let observer = Observer {
        spec,
        noise: Normal::new(0.0, spec.feature_model.noise_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::InvalidSpec(e.to_string()))?,
        max_entropy: (spec.vocab_size as f64).ln(),
    };
    let traces = (0..spec.n_prompts).map(|i| prompt_trace(spec, i, &observer)).collect();
    let metadata = TraceMetadata {
        format_version: FORMAT_VERSION,
        model_name: "synthetic".into(),
        layer_count: spec.layer_count,
        vocab_size: Some(spec.vocab_size),
        n_generations: spec.n_generations,
        temperature: spec.temperature,
        postilla_token_count: spec.postilla_token_count,
        feature_flags: vec!["synthetic".into(), "logitlens".into()],
    };
    Ok(TraceSet::new(metadata, traces))
}

/// Raw entropy in nats by direct summation of `-p ln p`, in input order.
pub fn oracle_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h
}

/// Entropy normalized by the log of the number of non-zero counts.
pub fn oracle_normalized_entropy(counts: &[usize]) -> f64 {
    let k = counts.iter().filter(|&&c| c > 0).count();
    if k <= 1 {
        0.0
    } else {
        oracle_entropy(counts) / (k as f64).ln()
    }
}

/// ROC AUC as the fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half, by enumerating every pair.
pub fn oracle_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice_concordant, mut pos, mut neg) = (0u64, 0u64, 0u64);
    for &l in labels {
        if l {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] {
                continue;
            }
            if scores[i] > scores[j] {
                twice_concordant += 2;
            } else if scores[i] == scores[j] {
                twice_concordant += 1;
            }
        }
    }
    twice_concordant as f64 / (2 * pos * neg) as f64
}

/// Dataset accuracy after a perfect annotator fixes the `ceil(B n)` highest
/// scoring prompts, picked one at a time (earliest index on ties).
pub fn oracle_budget(accuracies: &[f64], scores: &[f64], budget: f64) -> f64 {
    let n = accuracies.len();
    let k = ((budget * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut corrected = accuracies.to_vec();
    let mut taken = vec![false; n];
    for _ in 0..k.min(n) {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !taken[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k <= n");
        taken[b] = true;
        corrected[b] = 1.0;
    }
    corrected.sort_by(f64::total_cmp);
    corrected.iter().sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::uncertainty_target;
    use crate::trace::{validate_trace_set, write_traces_to};

    fn small(n_prompts: usize) -> SyntheticSpec {
        SyntheticSpec {
            n_prompts,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn default_spec_passes_validation() {
        let set = generate_traces(&small(200)).unwrap();
        let report = validate_trace_set(&set);
        assert!(report.is_clean(), "{:?}", &report.violations[..report.violations.len().min(5)]);
    }

    #[test]
    fn tokens_concatenate_to_answer() {
        let set = generate_traces(&small(20)).unwrap();
        for t in &set.traces {
            for g in &t.generations {
                let joined: String = g.generated_tokens.iter().map(|t| t.token_text.as_str()).collect();
                assert_eq!(joined, g.answer_text);
            }
        }
    }

    #[test]
    fn certain_class_gives_zero_entropy() {
        let spec = SyntheticSpec {
            answer_model: AnswerModel::Fixed { probs: vec![1.0] },
            paraphrase_rate: 0.0,
            off_list_rate: 0.0,
            ..small(30)
        };
        for t in &generate_traces(&spec).unwrap().traces {
            let u = uncertainty_target(t).unwrap();
            assert_eq!((u.pe_norm, u.se_norm), (0.0, 0.0));
        }
    }

    #[test]
    fn uniform_classes_approach_full_entropy() {
        let spec = SyntheticSpec {
            n_generations: 10_000,
            candidate_count: 4,
            answer_model: AnswerModel::Fixed { probs: vec![0.25; 4] },
            paraphrase_rate: 0.0,
            off_list_rate: 0.0,
            ..small(1)
        };
        let set = generate_traces(&spec).unwrap();
        let u = uncertainty_target(&set.traces[0]).unwrap();
        assert!((u.pe_norm - 1.0).abs() < 0.02, "{}", u.pe_norm);
    }

    #[test]
    fn zero_temperature_has_no_variation() {
        let spec = SyntheticSpec {
            temperature: 0.0,
            ..small(50)
        };
        let set = generate_traces(&spec).unwrap();
        assert!(validate_trace_set(&set).is_clean());
        assert!(set.traces.iter().all(|t| t.unique_answers() == 1));
    }

    #[test]
    fn same_seed_same_bytes() {
        let bytes = |spec: &SyntheticSpec| {
            let mut buf = Vec::new();
            write_traces_to(&mut buf, &generate_traces(spec).unwrap()).unwrap();
            buf
        };
        assert_eq!(bytes(&small(40)), bytes(&small(40)));
        assert_ne!(bytes(&small(40)), bytes(&SyntheticSpec { seed: 12, ..small(40) }));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SyntheticSpec {
                answer_model: AnswerModel::Fixed { probs: vec![0.5, 0.4] },
                ..small(1)
            },
            SyntheticSpec {
                feature_model: FeatureModel {
                    noise_sigma: -1.0,
                    ..Default::default()
                },
                ..small(1)
            },
            SyntheticSpec { n_prompts: 0, ..small(1) },
        ];
        for spec in bad {
            assert!(matches!(generate_traces(&spec), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn oracle_examples() {
        assert!((oracle_entropy(&[5, 3, 2]) - 1.02965).abs() < 1e-5);
        assert_eq!(oracle_auc(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, false]), 0.75);
        assert_eq!(oracle_budget(&[1.0, 0.0, 0.5, 0.5], &[0.0, 0.9, 0.6, 0.2], 0.25), 0.75);
    }

    #[test]
    fn temper_keeps_mode_at_zero() {
        assert_eq!(temper(&[0.2, 0.5, 0.3], 0.0), vec![0.0, 1.0, 0.0]);
        let hot = temper(&[0.2, 0.8], 2.0);
        assert!(hot[0] > 0.2 && (hot.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
