//! Semantic checks over a loaded trace set. Structural problems fail the
//! load; everything here is collected into a [`ValidationReport`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{PromptTrace, SegmentName, TokenObservables, TraceMetadata, TraceSet, UNMATCHED_PREFIX};

const PROB_TOL: f64 = 1e-9;

/// One invariant violation. `trace_index` is the 0-based position of the
/// prompt record (file line `trace_index + 2`); `None` refers to metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub trace_index: Option<usize>,
    pub prompt_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checked_traces: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Collector<'a> {
    report: &'a mut ValidationReport,
    index: Option<usize>,
    prompt_id: Option<String>,
}

impl Collector<'_> {
    fn push(&mut self, message: String) {
        self.report.violations.push(Violation {
            trace_index: self.index,
            prompt_id: self.prompt_id.clone(),
            message,
        });
    }
}

fn check_metadata(meta: &TraceMetadata, c: &mut Collector<'_>) {
    if meta.format_version != super::FORMAT_VERSION {
        c.push(format!(
            "format_version {} is not supported (expected {})",
            meta.format_version,
            super::FORMAT_VERSION
        ));
    }
    if meta.layer_count == 0 {
        c.push("layer_count must be at least 1".into());
    }
    if meta.n_generations == 0 {
        c.push("N must be at least 1".into());
    }
    if !(meta.temperature.is_finite() && meta.temperature >= 0.0) {
        c.push(format!("temperature {} must be finite and >= 0", meta.temperature));
    }
    if meta.vocab_size == Some(0) {
        c.push("vocab_size must be positive when recorded".into());
    }
}

fn check_token(tok: &TokenObservables, where_: &str, meta: &TraceMetadata, c: &mut Collector<'_>) {
    let bad = |what: &str| format!("{where_}: {what}");
    if let Some(lp) = tok.chosen_logprob {
        if !lp.is_finite() || lp > 0.0 {
            c.push(bad(&format!("chosen_logprob {lp} must be finite and <= 0")));
        } else if lp.exp() > tok.max_prob + PROB_TOL {
            c.push(bad(&format!(
                "exp(chosen_logprob) = {} exceeds max_prob {}",
                lp.exp(),
                tok.max_prob
            )));
        }
    }
    if !(tok.max_prob > 0.0 && tok.max_prob <= 1.0) {
        c.push(bad(&format!("max_prob {} outside (0, 1]", tok.max_prob)));
    }
    if !(tok.entropy.is_finite() && tok.entropy >= 0.0) {
        c.push(bad(&format!("entropy {} must be finite and >= 0", tok.entropy)));
    } else if let Some(v) = meta.vocab_size.filter(|&v| v > 0) {
        let bound = (v as f64).ln();
        if tok.entropy > bound + PROB_TOL {
            c.push(bad(&format!("entropy {} exceeds ln|V| = {bound}", tok.entropy)));
        }
    }
    let expected_kl = meta.layer_count.saturating_sub(1);
    if !tok.logitlens_kl.is_empty() && tok.logitlens_kl.len() != expected_kl {
        c.push(bad(&format!(
            "logitlens_kl has {} values, expected {expected_kl}",
            tok.logitlens_kl.len()
        )));
    }
    if tok.logitlens_kl.iter().any(|kl| !(kl.is_finite() && *kl >= 0.0)) {
        c.push(bad("logitlens_kl values must be finite and >= 0"));
    }
}

fn check_trace(t: &PromptTrace, meta: &TraceMetadata, c: &mut Collector<'_>) {
    let p = &t.prompt;
    if p.prompt_id.is_empty() {
        c.push("prompt_id is empty".into());
    }
    if p.candidates.is_empty() {
        c.push("candidate list is empty".into());
    }
    let mut rendered = BTreeSet::new();
    for (i, cand) in p.candidates.iter().enumerate() {
        if cand.entity_id.is_empty() {
            c.push(format!("candidate {i}: empty entity_id"));
        }
        if cand.entity_id.starts_with(UNMATCHED_PREFIX) {
            c.push(format!("candidate {i}: entity_id collides with the unmatched sentinel prefix"));
        }
        if cand.label.trim().is_empty() {
            c.push(format!("candidate {i}: empty label"));
        }
        if !rendered.insert(cand.render()) {
            c.push(format!("candidate {i}: rendered form duplicates an earlier candidate"));
        }
    }
    if !p.candidates.iter().any(|cand| cand.entity_id == p.gold_entity_id) {
        c.push(format!("gold entity {} is not among the candidates", p.gold_entity_id));
    }

    let mut prev_end = 0usize;
    for (name, span) in &p.segment_spans {
        if span.end < span.start {
            c.push(format!("segment {name}: end {} before start {}", span.end, span.start));
        }
        if span.start < prev_end {
            c.push(format!("segment {name} overlaps or precedes the previous segment"));
        }
        prev_end = prev_end.max(span.end);
    }
    match p.segment_spans.get(&SegmentName::Postilla) {
        None => c.push("segment_spans has no Postilla span".into()),
        Some(span) if span.len() != meta.postilla_token_count => c.push(format!(
            "Postilla span length {} != postilla_token_count {}",
            span.len(),
            meta.postilla_token_count
        )),
        Some(_) => {}
    }
    if t.postilla_tokens.len() != meta.postilla_token_count {
        c.push(format!(
            "{} postilla tokens, expected {}",
            t.postilla_tokens.len(),
            meta.postilla_token_count
        ));
    }
    for (i, tok) in t.postilla_tokens.iter().enumerate() {
        check_token(tok, &format!("postilla token {i}"), meta, c);
    }

    if t.generations.len() != meta.n_generations {
        c.push(format!(
            "{} generations, metadata N = {}",
            t.generations.len(),
            meta.n_generations
        ));
    }
    for (pos, g) in t.generations.iter().enumerate() {
        if g.gen_index != pos {
            c.push(format!("generation at position {pos} has gen_index {}", g.gen_index));
        }
        if g.temperature != meta.temperature {
            c.push(format!(
                "generation {}: temperature {} differs from trace-set temperature {}",
                g.gen_index, g.temperature, meta.temperature
            ));
        }
        if g.generated_tokens.is_empty() {
            c.push(format!("generation {}: no generated tokens", g.gen_index));
        }
        for (i, tok) in g.generated_tokens.iter().enumerate() {
            check_token(tok, &format!("generation {} token {i}", g.gen_index), meta, c);
        }
    }
}

/// Checks every trace-set invariant and lists all violations.
pub fn validate_trace_set(set: &TraceSet) -> ValidationReport {
    let mut report = ValidationReport {
        checked_traces: set.traces.len(),
        violations: Vec::new(),
    };
    check_metadata(
        &set.metadata,
        &mut Collector {
            report: &mut report,
            index: None,
            prompt_id: None,
        },
    );
    let mut seen = BTreeSet::new();
    for (i, t) in set.traces.iter().enumerate() {
        let mut c = Collector {
            report: &mut report,
            index: Some(i),
            prompt_id: Some(t.prompt.prompt_id.clone()),
        };
        if !seen.insert(t.prompt.prompt_id.as_str()) {
            c.push(format!("duplicate prompt_id {}", t.prompt.prompt_id));
        }
        check_trace(t, &set.metadata, &mut c);
    }
    report
}
