//! A-posteriori uncertainty targets computed from `N` generations:
//! Predictive Entropy over raw answers, Semantic Entropy over extracted
//! candidate classes, and per-generation perplexity.
//!
//! All entropies are in nats. Normalization divides by `ln(unique)`, with a
//! single unique outcome normalizing to 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{AnswerOutcome, GenerationRecord, PromptTrace};

/// Empirical distribution over string keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
}

impl AnswerDistribution {
    pub fn from_keys<'a>(keys: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts = BTreeMap::new();
        let mut total = 0;
        for k in keys {
            *counts.entry(k.to_owned()).or_insert(0) += 1;
            total += 1;
        }
        Self { counts, total }
    }

    pub fn unique(&self) -> usize {
        self.counts.len()
    }

    pub fn probability(&self, key: &str) -> f64 {
        self.counts.get(key).map_or(0.0, |&c| c as f64 / self.total as f64)
    }

    /// Counts sorted descending: entropy depends only on this multiset.
    pub fn sorted_counts(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.counts.values().copied().collect();
        c.sort_unstable_by(|a, b| b.cmp(a));
        c
    }

    /// `(raw, normalized)` entropy of the distribution.
    pub fn entropy(&self) -> (f64, f64) {
        entropy_of_counts(&self.sorted_counts())
    }
}

/// Entropy of a count vector as `ln T - (1/T) sum c ln c`.
///
/// Returns `(raw, normalized)`. One outcome gives exactly `(0, 0)`; equal
/// counts normalize to exactly 1.
pub fn entropy_of_counts(counts: &[usize]) -> (f64, f64) {
    let nonzero: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    let unique = nonzero.len();
    if unique <= 1 {
        return (0.0, 0.0);
    }
    let mut sorted = nonzero;
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let total: usize = sorted.iter().sum();
    let t = total as f64;
    let weighted: f64 = sorted.iter().map(|&c| c as f64 * (c as f64).ln()).sum();
    let raw = (t.ln() - weighted / t).max(0.0);
    let max = (unique as f64).ln();
    if sorted.first() == sorted.last() {
        return (max, 1.0);
    }
    (raw, (raw / max).clamp(0.0, 1.0))
}

/// Distribution over raw answer strings.
pub fn answer_distribution<'a>(answers: impl IntoIterator<Item = &'a str>) -> AnswerDistribution {
    AnswerDistribution::from_keys(answers)
}

/// Distribution over extracted classes.
pub fn semantic_distribution(outcomes: &[AnswerOutcome]) -> AnswerDistribution {
    AnswerDistribution::from_keys(outcomes.iter().map(|o| o.class_id.as_str()))
}

pub fn predictive_entropy(d: &AnswerDistribution) -> (f64, f64) {
    d.entropy()
}

pub fn semantic_entropy(d: &AnswerDistribution) -> (f64, f64) {
    d.entropy()
}

/// `exp(-mean chosen_logprob)` over the generated tokens.
pub fn perplexity(g: &GenerationRecord) -> Result<f64> {
    perplexity_of(g).ok_or_else(|| Error::MissingLogprob {
        prompt_id: String::new(),
        gen_index: g.gen_index,
    })
}

fn perplexity_of(g: &GenerationRecord) -> Option<f64> {
    if g.generated_tokens.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for t in &g.generated_tokens {
        sum += t.chosen_logprob?;
    }
    let mean = sum / g.generated_tokens.len() as f64;
    Some((-mean).exp().max(1.0))
}

/// All a-posteriori measures for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTarget {
    pub pe_raw: f64,
    pub pe_norm: f64,
    pub se_raw: f64,
    pub se_norm: f64,
    /// Perplexity of each generation, in generation order.
    pub perplexity: Vec<f64>,
    pub unique_answers: usize,
    pub unique_classes: usize,
}

impl UncertaintyTarget {
    pub fn mean_perplexity(&self) -> f64 {
        if self.perplexity.is_empty() {
            return f64::NAN;
        }
        self.perplexity.iter().sum::<f64>() / self.perplexity.len() as f64
    }

    pub fn normalized(&self, kind: TargetKind) -> f64 {
        match kind {
            TargetKind::Pe => self.pe_norm,
            TargetKind::Se => self.se_norm,
        }
    }
}

/// Which normalized entropy the regressor learns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Pe,
    Se,
}

impl std::fmt::Display for TargetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetKind::Pe => "pe",
            TargetKind::Se => "se",
        })
    }
}

impl std::str::FromStr for TargetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pe" => Ok(TargetKind::Pe),
            "se" => Ok(TargetKind::Se),
            other => Err(Error::InvalidArgument(format!("unknown target kind {other:?}"))),
        }
    }
}

pub fn uncertainty_target(t: &PromptTrace) -> Result<UncertaintyTarget> {
    if t.generations.is_empty() {
        return Err(Error::NoGenerations(t.prompt.prompt_id.clone()));
    }
    let answers = answer_distribution(t.generations.iter().map(|g| g.answer_text.as_str()));
    let classes = semantic_distribution(&t.outcomes());
    let (pe_raw, pe_norm) = predictive_entropy(&answers);
    let (se_raw, se_norm) = semantic_entropy(&classes);
    let perplexity = t
        .generations
        .iter()
        .map(|g| {
            perplexity_of(g).ok_or_else(|| Error::MissingLogprob {
                prompt_id: t.prompt.prompt_id.clone(),
                gen_index: g.gen_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UncertaintyTarget {
        pe_raw,
        pe_norm,
        se_raw,
        se_norm,
        perplexity,
        unique_answers: answers.unique(),
        unique_classes: classes.unique(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TokenObservables;
    use proptest::prelude::*;

    /// Direct summation `-sum p ln p`, kept independent of the main path.
    fn direct_entropy(counts: &[usize]) -> f64 {
        let total: usize = counts.iter().sum();
        -counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                p * p.ln()
            })
            .sum::<f64>()
    }

    fn dist(pairs: &[(&str, usize)]) -> AnswerDistribution {
        let keys: Vec<&str> = pairs
            .iter()
            .flat_map(|(k, n)| std::iter::repeat_n(*k, *n))
            .collect();
        answer_distribution(keys)
    }

    fn gen_with_probs(probs: &[f64]) -> GenerationRecord {
        GenerationRecord {
            gen_index: 0,
            answer_text: "x".into(),
            generated_tokens: probs
                .iter()
                .map(|&p| TokenObservables {
                    token_id: 0,
                    token_text: "x".into(),
                    chosen_logprob: Some(p.ln()),
                    max_prob: p,
                    entropy: 0.0,
                    logitlens_kl: vec![],
                })
                .collect(),
            temperature: 1.0,
        }
    }

    #[test]
    fn distribution_counts() {
        let d = dist(&[("a", 10)]);
        assert_eq!(d.unique(), 1);
        assert_eq!(d.counts["a"], 10);
        let d = dist(&[("a", 5), ("b", 3), ("c", 2)]);
        assert_eq!(d.sorted_counts(), vec![5, 3, 2]);
        assert_eq!(d.total, 10);
        let keys: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let d = answer_distribution(keys.iter().map(String::as_str));
        assert_eq!(d.unique(), 10);
        assert!(d.counts.values().all(|&c| c == 1));
    }

    #[test]
    fn single_answer_has_zero_entropy() {
        assert_eq!(predictive_entropy(&dist(&[("a", 10)])), (0.0, 0.0));
    }

    #[test]
    fn balanced_pair_is_ln2_and_one() {
        let (raw, norm) = predictive_entropy(&dist(&[("a", 5), ("b", 5)]));
        assert!((raw - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(norm, 1.0);
    }

    #[test]
    fn five_three_two_matches_direct_summation() {
        let (raw, norm) = predictive_entropy(&dist(&[("a", 5), ("b", 3), ("c", 2)]));
        let oracle = direct_entropy(&[5, 3, 2]);
        assert!((raw - oracle).abs() < 1e-12);
        assert!((raw - 1.02965).abs() < 1e-5);
        assert!((norm - 0.93723).abs() < 1e-5);
        assert!((norm - oracle / 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn merged_classes_entropy() {
        let (raw, norm) = semantic_entropy(&dist(&[("X", 8), ("Y", 2)]));
        let oracle = direct_entropy(&[8, 2]);
        assert!((raw - oracle).abs() < 1e-12);
        assert!((raw - 0.50040).abs() < 1e-5);
        assert!((norm - 0.72193).abs() < 1e-5);
    }

    #[test]
    fn uniform_classes_normalize_to_one() {
        for k in 2..12 {
            let keys: Vec<String> = (0..k * 3).map(|i| format!("c{}", i % k)).collect();
            let d = answer_distribution(keys.iter().map(String::as_str));
            assert_eq!(semantic_entropy(&d).1, 1.0);
        }
    }

    #[test]
    fn perplexity_analytic_cases() {
        assert!((perplexity(&gen_with_probs(&[0.5])).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(perplexity(&gen_with_probs(&[1.0, 1.0, 1.0])).unwrap(), 1.0);
        assert!((perplexity(&gen_with_probs(&[0.5, 0.125])).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn missing_logprob_is_an_error() {
        let mut g = gen_with_probs(&[0.5, 0.5]);
        g.generated_tokens[1].chosen_logprob = None;
        assert!(matches!(perplexity(&g), Err(Error::MissingLogprob { .. })));
    }

    proptest! {
        #[test]
        fn entropy_matches_direct_summation(counts in proptest::collection::vec(1usize..40, 1..12)) {
            let (raw, norm) = entropy_of_counts(&counts);
            prop_assert!((raw - direct_entropy(&counts)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&norm));
        }

        #[test]
        fn entropy_is_order_invariant(mut counts in proptest::collection::vec(1usize..40, 1..12), seed in any::<u64>()) {
            let before = entropy_of_counts(&counts);
            let n = counts.len();
            counts.rotate_left((seed as usize) % n);
            prop_assert_eq!(before, entropy_of_counts(&counts));
        }

        #[test]
        fn merging_never_increases_entropy(counts in proptest::collection::vec(1usize..20, 2..10), a in 0usize..10, b in 0usize..10) {
            let n = counts.len();
            let (a, b) = (a % n, b % n);
            prop_assume!(a != b);
            let mut merged = counts.clone();
            merged[a] += merged[b];
            merged.remove(b);
            prop_assert!(entropy_of_counts(&merged).0 <= entropy_of_counts(&counts).0);
        }

        #[test]
        fn perplexity_at_least_one(probs in proptest::collection::vec(1e-6f64..=1.0, 1..20)) {
            prop_assert!(perplexity(&gen_with_probs(&probs)).unwrap() >= 1.0);
        }
    }
}
