//! Trace model: the recorded prompts, candidates and per-token observables
//! that every downstream analysis consumes.
//!
//! A trace set is one model's answers to a batch of entity-linking prompts.
//! Each [`PromptTrace`] holds the prompt, the observables of its Postilla
//! tokens (stored once, since prompt-side forward passes do not depend on the
//! sample) and `N` sampled generations.

mod candidate;
mod dataset;
mod io;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use candidate::{
    extract_answer, normalize_answer, parse_candidate, render_candidate, CandidateText,
    UNMATCHED_PREFIX,
};
pub use dataset::{dataset_from_traces, load_dataset, read_dataset, write_dataset, DatasetRecord, Mention};
pub use io::{hash_file, load_traces, read_traces, write_traces, write_traces_to};
pub use validate::{validate_trace_set, ValidationReport, Violation};

/// Current trace-file format version.
pub const FORMAT_VERSION: u32 = 1;

/// One KG entity offered to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateEntity {
    pub entity_id: String,
    pub label: String,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub type_labels: Vec<String>,
}

impl CandidateEntity {
    pub fn new(
        entity_id: impl Into<String>,
        label: impl Into<String>,
        description: Option<&str>,
        type_labels: &[&str],
    ) -> Self {
        Self {
            entity_id: entity_id.into(),
            label: label.into(),
            description: description.map(str::to_owned),
            type_labels: type_labels.iter().map(|t| (*t).to_owned()).collect(),
        }
    }

    pub fn render(&self) -> String {
        render_candidate(self)
    }
}

/// Column reference of a mention: either the header name or its index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MentionColumn {
    Index(u64),
    Name(String),
}

/// Named prompt segments, in prompt order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SegmentName {
    Instruction,
    Input,
    Question,
    Postilla,
}

impl fmt::Display for SegmentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SegmentName::Instruction => "Instruction",
            SegmentName::Input => "Input",
            SegmentName::Question => "Question",
            SegmentName::Postilla => "Postilla",
        };
        f.write_str(s)
    }
}

/// Half-open token-index range `[start, end)` within the prompt token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<[usize; 2]> for TokenSpan {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<TokenSpan> for [usize; 2] {
    fn from(s: TokenSpan) -> Self {
        [s.start, s.end]
    }
}

/// One entity-linking prompt: table mention, candidate set and gold entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub prompt_id: String,
    pub mention_text: String,
    pub mention_row: u64,
    pub mention_col: MentionColumn,
    #[serde(default)]
    pub table_markdown: Option<String>,
    pub candidates: Vec<CandidateEntity>,
    pub gold_entity_id: String,
    #[serde(default)]
    pub segment_spans: BTreeMap<SegmentName, TokenSpan>,
}

/// Scalar observables of one token position.
///
/// Serialized on the wire as
/// `[token_id, token_text, chosen_logprob, max_prob, entropy, [kl_1, ..., kl_{L-1}]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TokenTuple", into = "TokenTuple")]
pub struct TokenObservables {
    pub token_id: u32,
    pub token_text: String,
    /// Natural log of the probability of the realized next token. `None`
    /// when the producer did not record it.
    pub chosen_logprob: Option<f64>,
    pub max_prob: f64,
    /// Entropy of the next-token distribution, in nats.
    pub entropy: f64,
    /// KL(p^l || p^L) for intermediate layers `1..L-1`, in layer order.
    pub logitlens_kl: Vec<f64>,
}

type TokenTuple = (u32, String, Option<f64>, f64, f64, Vec<f64>);

impl From<TokenTuple> for TokenObservables {
    fn from(t: TokenTuple) -> Self {
        Self {
            token_id: t.0,
            token_text: t.1,
            chosen_logprob: t.2,
            max_prob: t.3,
            entropy: t.4,
            logitlens_kl: t.5,
        }
    }
}

impl From<TokenObservables> for TokenTuple {
    fn from(t: TokenObservables) -> Self {
        (
            t.token_id,
            t.token_text,
            t.chosen_logprob,
            t.max_prob,
            t.entropy,
            t.logitlens_kl,
        )
    }
}

/// One sampled answer with its generated-token observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub gen_index: usize,
    pub answer_text: String,
    pub generated_tokens: Vec<TokenObservables>,
    pub temperature: f64,
}

/// A prompt together with its Postilla observables and all generations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTrace {
    pub prompt: PromptInstance,
    pub postilla_tokens: Vec<TokenObservables>,
    pub generations: Vec<GenerationRecord>,
}

impl PromptTrace {
    pub fn prompt_id(&self) -> &str {
        &self.prompt.prompt_id
    }

    /// Extracted outcome of every generation, in generation order.
    pub fn outcomes(&self) -> Vec<AnswerOutcome> {
        self.generations
            .iter()
            .map(|g| {
                extract_answer(
                    &g.answer_text,
                    &self.prompt.candidates,
                    &self.prompt.gold_entity_id,
                )
            })
            .collect()
    }

    /// Number of distinct raw answer strings.
    pub fn unique_answers(&self) -> usize {
        let mut answers: Vec<&str> = self.generations.iter().map(|g| g.answer_text.as_str()).collect();
        answers.sort_unstable();
        answers.dedup();
        answers.len()
    }
}

/// Result of post-processing one answer against the candidate list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOutcome {
    /// Matched candidate `entity_id`, or `unmatched:<normalized answer>`.
    pub class_id: String,
    pub correct: bool,
    pub matched_verbatim: bool,
    /// More than one distinct candidate occurs in the answer.
    pub ambiguous: bool,
}

/// Mean correctness over the trace's generations.
pub fn answer_accuracy(trace: &PromptTrace) -> f64 {
    let n = trace.generations.len();
    if n == 0 {
        return 0.0;
    }
    let correct = trace.outcomes().iter().filter(|o| o.correct).count();
    correct as f64 / n as f64
}

/// First line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub format_version: u32,
    pub model_name: String,
    pub layer_count: usize,
    #[serde(default)]
    pub vocab_size: Option<u64>,
    #[serde(rename = "N")]
    pub n_generations: usize,
    pub temperature: f64,
    pub postilla_token_count: usize,
    #[serde(default)]
    pub feature_flags: Vec<String>,
}

/// A loaded trace file: metadata plus prompt traces in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub metadata: TraceMetadata,
    pub traces: Vec<PromptTrace>,
    /// SHA-256 of the file bytes when loaded from disk.
    pub source_hash: Option<String>,
}

impl TraceSet {
    pub fn new(metadata: TraceMetadata, traces: Vec<PromptTrace>) -> Self {
        Self {
            metadata,
            traces,
            source_hash: None,
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.traces.iter().map(answer_accuracy).collect()
    }

    /// Stable identity of the trace content: the file hash when loaded from
    /// disk, otherwise the hash of the serialized form.
    pub fn content_hash(&self) -> String {
        match &self.source_hash {
            Some(h) => h.clone(),
            None => {
                let mut buf = Vec::new();
                // Writing to a Vec cannot fail.
                write_traces_to(&mut buf, self).expect("in-memory serialization");
                crate::digest::sha256_hex(&buf)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> TokenObservables {
        TokenObservables {
            token_id: 7,
            token_text: "<".into(),
            chosen_logprob: Some(-0.25),
            max_prob: 0.9,
            entropy: 0.3,
            logitlens_kl: vec![1.0, 0.5],
        }
    }

    #[test]
    fn token_wire_format_is_a_positional_array() {
        let json = serde_json::to_string(&tok()).unwrap();
        assert_eq!(json, r#"[7,"<",-0.25,0.9,0.3,[1.0,0.5]]"#);
        let back: TokenObservables = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tok());
    }

    #[test]
    fn null_logprob_decodes_as_missing() {
        let t: TokenObservables = serde_json::from_str(r#"[1,"a",null,0.5,0.1,[]]"#).unwrap();
        assert_eq!(t.chosen_logprob, None);
    }

    #[test]
    fn mention_column_accepts_name_or_index() {
        let a: MentionColumn = serde_json::from_str("3").unwrap();
        let b: MentionColumn = serde_json::from_str("\"county\"").unwrap();
        assert_eq!(a, MentionColumn::Index(3));
        assert_eq!(b, MentionColumn::Name("county".into()));
    }

    #[test]
    fn metadata_uses_capital_n() {
        let m = TraceMetadata {
            format_version: 1,
            model_name: "m".into(),
            layer_count: 3,
            vocab_size: Some(100),
            n_generations: 10,
            temperature: 1.0,
            postilla_token_count: 4,
            feature_flags: vec![],
        };
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["N"], 10);
    }
}
