//! Fixed-length per-generation feature vectors.
//!
//! Per-token observables are kept positional (concatenated in token order),
//! never pooled. A [`FeatureConfig`] fully determines the vector length and
//! its digest tags every vector and model built from it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::measures::{uncertainty_target, TargetKind};
use crate::trace::{PromptTrace, TokenObservables, TraceMetadata};

/// Token stream the features are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    /// All tokens of the fixed-width prompt tail.
    Postilla,
    /// The first `generated_token_count` generated tokens.
    Generated,
    /// The first `window_end` tokens of Postilla followed by Generated.
    Window,
}

/// Which observables each token contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureGroup {
    /// `[max_prob, entropy]`.
    Output,
    /// The `L-1` LogitLens KL values.
    Logitlens,
    /// Output then LogitLens.
    Combined,
}

impl std::str::FromStr for Segment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "postilla" => Ok(Segment::Postilla),
            "generated" => Ok(Segment::Generated),
            "window" => Ok(Segment::Window),
            other => Err(Error::InvalidArgument(format!("unknown segment {other:?}"))),
        }
    }
}

impl std::str::FromStr for FeatureGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "output" => Ok(FeatureGroup::Output),
            "logitlens" => Ok(FeatureGroup::Logitlens),
            "combined" => Ok(FeatureGroup::Combined),
            other => Err(Error::InvalidArgument(format!("unknown feature group {other:?}"))),
        }
    }
}

impl std::fmt::Display for Segment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Segment::Postilla => "postilla",
            Segment::Generated => "generated",
            Segment::Window => "window",
        })
    }
}

impl std::fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureGroup::Output => "output",
            FeatureGroup::Logitlens => "logitlens",
            FeatureGroup::Combined => "combined",
        })
    }
}

pub const DEFAULT_GENERATED_TOKENS: usize = 10;
pub const DEFAULT_PAD_VALUE: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub segment: Segment,
    pub group: FeatureGroup,
    pub generated_token_count: usize,
    #[serde(default)]
    pub window_end: Option<usize>,
    pub layer_count: usize,
    pub pad_value: f64,
    pub postilla_token_count: usize,
}

impl FeatureConfig {
    /// Config with the default `G = 10` and `-1` padding, sized for `meta`.
    pub fn for_metadata(meta: &TraceMetadata, segment: Segment, group: FeatureGroup) -> Self {
        Self {
            segment,
            group,
            generated_token_count: DEFAULT_GENERATED_TOKENS,
            window_end: None,
            layer_count: meta.layer_count,
            pad_value: DEFAULT_PAD_VALUE,
            postilla_token_count: meta.postilla_token_count,
        }
    }

    pub fn with_window(mut self, window_end: usize) -> Self {
        self.segment = Segment::Window;
        self.window_end = Some(window_end);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidFeatureConfig(m));
        if self.generated_token_count == 0 {
            return bad("generated_token_count must be at least 1".into());
        }
        if self.group != FeatureGroup::Output && self.layer_count < 2 {
            return bad(format!(
                "group {} needs at least 2 layers, layer_count = {}",
                self.group, self.layer_count
            ));
        }
        if !self.pad_value.is_finite() {
            return bad("pad_value must be finite".into());
        }
        match (self.segment, self.window_end) {
            (Segment::Window, None) => bad("window segment needs window_end".into()),
            (Segment::Window, Some(0)) => bad("window covering zero tokens".into()),
            (Segment::Window, Some(end)) if end > self.postilla_token_count + self.generated_token_count => {
                bad(format!(
                    "window_end {end} exceeds postilla ({}) + generated ({}) tokens",
                    self.postilla_token_count, self.generated_token_count
                ))
            }
            (Segment::Postilla, _) if self.postilla_token_count == 0 => {
                bad("postilla segment with zero postilla tokens".into())
            }
            _ => Ok(()),
        }
    }

    /// Values per token.
    pub fn token_width(&self) -> usize {
        let kl = self.layer_count.saturating_sub(1);
        match self.group {
            FeatureGroup::Output => 2,
            FeatureGroup::Logitlens => kl,
            FeatureGroup::Combined => 2 + kl,
        }
    }

    /// Token positions covered by the segment.
    pub fn token_count(&self) -> usize {
        match self.segment {
            Segment::Postilla => self.postilla_token_count,
            Segment::Generated => self.generated_token_count,
            Segment::Window => self.window_end.unwrap_or(0),
        }
    }

    pub fn vector_len(&self) -> usize {
        self.token_width() * self.token_count()
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }

    /// Column names `segment.tokenIdx.featureName[.layerIdx]`.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.vector_len());
        for pos in 0..self.token_count() {
            let (seg, idx) = match self.segment {
                Segment::Postilla => ("postilla", pos),
                Segment::Generated => ("generated", pos),
                Segment::Window if pos < self.postilla_token_count => ("postilla", pos),
                Segment::Window => ("generated", pos - self.postilla_token_count),
            };
            if self.group != FeatureGroup::Logitlens {
                names.push(format!("{seg}.{idx}.max_prob"));
                names.push(format!("{seg}.{idx}.entropy"));
            }
            if self.group != FeatureGroup::Output {
                for layer in 1..self.layer_count {
                    names.push(format!("{seg}.{idx}.logitlens_kl.{layer}"));
                }
            }
        }
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub config_digest: String,
    pub prompt_id: String,
    pub gen_index: usize,
}

/// Observables of one token under a feature group.
pub fn token_feature_slice(tok: &TokenObservables, group: FeatureGroup) -> Result<Vec<f64>> {
    let needs_kl = group != FeatureGroup::Output;
    if needs_kl && tok.logitlens_kl.is_empty() {
        return Err(Error::MissingLayerFeatures);
    }
    let mut out = Vec::with_capacity(2 + tok.logitlens_kl.len());
    if group != FeatureGroup::Logitlens {
        out.push(tok.max_prob);
        out.push(tok.entropy);
    }
    if needs_kl {
        out.extend_from_slice(&tok.logitlens_kl);
    }
    Ok(out)
}

fn push_token(out: &mut Vec<f64>, tok: &TokenObservables, cfg: &FeatureConfig) -> Result<()> {
    let slice = token_feature_slice(tok, cfg.group)?;
    if slice.len() != cfg.token_width() {
        return Err(Error::ConfigMismatch(format!(
            "token carries {} LogitLens values, config expects {} layers",
            tok.logitlens_kl.len(),
            cfg.layer_count
        )));
    }
    out.extend_from_slice(&slice);
    Ok(())
}

/// Feature vector of generation `gen_index` of `trace`.
pub fn assemble_features(trace: &PromptTrace, gen_index: usize, cfg: &FeatureConfig) -> Result<FeatureVector> {
    cfg.validate()?;
    let prompt_id = trace.prompt_id();
    let generation = trace.generations.get(gen_index).ok_or_else(|| Error::GenerationOutOfRange {
        prompt_id: prompt_id.to_owned(),
        gen_index,
        available: trace.generations.len(),
    })?;
    if matches!(cfg.segment, Segment::Postilla | Segment::Window)
        && trace.postilla_tokens.len() != cfg.postilla_token_count
    {
        return Err(Error::ConfigMismatch(format!(
            "prompt {prompt_id} has {} postilla tokens, config expects {}",
            trace.postilla_tokens.len(),
            cfg.postilla_token_count
        )));
    }

    let width = cfg.token_width();
    let mut values = Vec::with_capacity(cfg.vector_len());
    let (postilla_take, generated_take) = match cfg.segment {
        Segment::Postilla => (cfg.postilla_token_count, 0),
        Segment::Generated => (0, cfg.generated_token_count),
        Segment::Window => {
            let end = cfg.window_end.unwrap_or(0);
            let p = end.min(cfg.postilla_token_count);
            (p, end - p)
        }
    };
    for tok in &trace.postilla_tokens[..postilla_take] {
        push_token(&mut values, tok, cfg)?;
    }
    for pos in 0..generated_take {
        match generation.generated_tokens.get(pos) {
            Some(tok) => push_token(&mut values, tok, cfg)?,
            None => values.extend(std::iter::repeat_n(cfg.pad_value, width)),
        }
    }
    debug_assert_eq!(values.len(), cfg.vector_len());
    if let Some(position) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteFeature {
            prompt_id: prompt_id.to_owned(),
            gen_index,
            position,
        });
    }
    Ok(FeatureVector {
        values,
        config_digest: cfg.digest(),
        prompt_id: prompt_id.to_owned(),
        gen_index,
    })
}

/// One row of the warm-up training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub features: FeatureVector,
    pub target: f64,
}

/// `N` pairs per prompt, in prompt order then generation order, each
/// carrying its prompt's normalized target.
pub fn build_training_pairs(
    traces: &[PromptTrace],
    cfg: &FeatureConfig,
    target_kind: TargetKind,
) -> Result<Vec<TrainingPair>> {
    let mut pairs = Vec::new();
    for t in traces {
        let target = uncertainty_target(t)?.normalized(target_kind);
        for gen_index in 0..t.generations.len() {
            pairs.push(TrainingPair {
                features: assemble_features(t, gen_index, cfg)?,
                target,
            });
        }
    }
    Ok(pairs)
}

/// Writes a feature matrix as CSV: `prompt_id,gen_index,target,<features>`.
pub fn write_feature_csv<W: Write>(w: W, cfg: &FeatureConfig, pairs: &[TrainingPair]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["prompt_id".to_owned(), "gen_index".into(), "target".into()];
    header.extend(cfg.feature_names());
    out.write_record(&header)?;
    let digest = cfg.digest();
    for p in pairs {
        if p.features.config_digest != digest {
            return Err(Error::ConfigMismatch("feature vector digest differs from config".into()));
        }
        let mut row = vec![
            p.features.prompt_id.clone(),
            p.features.gen_index.to_string(),
            p.target.to_string(),
        ];
        row.extend(p.features.values.iter().map(f64::to_string));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{
        CandidateEntity, GenerationRecord, MentionColumn, PromptInstance, SegmentName, TokenSpan,
    };
    use std::collections::BTreeMap;

    fn tok(max_prob: f64, entropy: f64, kl: &[f64]) -> TokenObservables {
        TokenObservables {
            token_id: 1,
            token_text: "t".into(),
            chosen_logprob: Some(max_prob.ln()),
            max_prob,
            entropy,
            logitlens_kl: kl.to_vec(),
        }
    }

    fn trace(gen_lens: &[usize], layers: usize, postilla: usize) -> PromptTrace {
        let kl: Vec<f64> = (1..layers).map(|l| l as f64 * 0.1).collect();
        let cand = CandidateEntity::new("Q1", "A", None, &["t"]);
        PromptTrace {
            prompt: PromptInstance {
                prompt_id: "p0".into(),
                mention_text: "A".into(),
                mention_row: 0,
                mention_col: MentionColumn::Index(0),
                table_markdown: None,
                gold_entity_id: "Q1".into(),
                segment_spans: BTreeMap::from([(SegmentName::Postilla, TokenSpan::new(0, postilla))]),
                candidates: vec![cand.clone()],
            },
            postilla_tokens: (0..postilla).map(|i| tok(0.5, i as f64, &kl)).collect(),
            generations: gen_lens
                .iter()
                .enumerate()
                .map(|(g, &n)| GenerationRecord {
                    gen_index: g,
                    answer_text: cand.render(),
                    generated_tokens: (0..n).map(|i| tok(0.9, 0.01 * i as f64, &kl)).collect(),
                    temperature: 1.0,
                })
                .collect(),
        }
    }

    fn cfg(segment: Segment, group: FeatureGroup, layers: usize, postilla: usize) -> FeatureConfig {
        FeatureConfig {
            segment,
            group,
            generated_token_count: 10,
            window_end: None,
            layer_count: layers,
            pad_value: -1.0,
            postilla_token_count: postilla,
        }
    }

    #[test]
    fn token_slices_by_group() {
        let t = tok(0.9, 0.3, &[0.4, 0.2, 0.1]);
        assert_eq!(token_feature_slice(&t, FeatureGroup::Output).unwrap(), vec![0.9, 0.3]);
        assert_eq!(token_feature_slice(&t, FeatureGroup::Logitlens).unwrap(), vec![0.4, 0.2, 0.1]);
        assert_eq!(
            token_feature_slice(&t, FeatureGroup::Combined).unwrap(),
            vec![0.9, 0.3, 0.4, 0.2, 0.1]
        );
    }

    #[test]
    fn missing_layers_rejected_for_logitlens() {
        let t = tok(0.9, 0.3, &[]);
        assert!(matches!(
            token_feature_slice(&t, FeatureGroup::Logitlens),
            Err(Error::MissingLayerFeatures)
        ));
        assert!(token_feature_slice(&t, FeatureGroup::Output).is_ok());
    }

    #[test]
    fn generated_output_takes_first_ten_tokens() {
        let tr = trace(&[12], 4, 3);
        let fv = assemble_features(&tr, 0, &cfg(Segment::Generated, FeatureGroup::Output, 4, 3)).unwrap();
        assert_eq!(fv.values.len(), 20);
        assert_eq!(fv.values[18], 0.9);
        assert!((fv.values[19] - 0.09).abs() < 1e-15);
    }

    #[test]
    fn combined_length_for_33_layers() {
        let c = cfg(Segment::Generated, FeatureGroup::Combined, 33, 5);
        assert_eq!(c.vector_len(), 340);
        let tr = trace(&[10], 33, 5);
        assert_eq!(assemble_features(&tr, 0, &c).unwrap().values.len(), 340);
    }

    #[test]
    fn short_generation_is_padded() {
        let tr = trace(&[4], 3, 2);
        let fv = assemble_features(&tr, 0, &cfg(Segment::Generated, FeatureGroup::Output, 3, 2)).unwrap();
        assert_eq!(fv.values.len(), 20);
        assert!(fv.values[..8].iter().all(|&v| v != -1.0));
        assert!(fv.values[8..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn postilla_features_identical_across_generations() {
        let tr = trace(&[3, 7, 12], 3, 4);
        let c = cfg(Segment::Postilla, FeatureGroup::Combined, 3, 4);
        let a = assemble_features(&tr, 0, &c).unwrap();
        let b = assemble_features(&tr, 2, &c).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.values.len(), 16);
    }

    #[test]
    fn window_spans_postilla_then_generated() {
        let tr = trace(&[2], 3, 3);
        let c = cfg(Segment::Window, FeatureGroup::Output, 3, 3).with_window(6);
        let fv = assemble_features(&tr, 0, &c).unwrap();
        assert_eq!(fv.values.len(), 12);
        // postilla entropies 0,1,2 then two generated tokens, then padding
        assert_eq!(&fv.values[..6], &[0.5, 0.0, 0.5, 1.0, 0.5, 2.0]);
        assert_eq!(fv.values[6], 0.9);
        assert_eq!(&fv.values[10..], &[-1.0, -1.0]);
        let names = c.feature_names();
        assert_eq!(names[0], "postilla.0.max_prob");
        assert_eq!(names[6], "generated.0.max_prob");
    }

    #[test]
    fn zero_window_rejected() {
        let c = cfg(Segment::Window, FeatureGroup::Output, 3, 3).with_window(0);
        assert!(matches!(c.validate(), Err(Error::InvalidFeatureConfig(_))));
    }

    #[test]
    fn layer_mismatch_is_reported() {
        let tr = trace(&[5], 5, 2);
        let c = cfg(Segment::Generated, FeatureGroup::Logitlens, 3, 2);
        assert!(matches!(assemble_features(&tr, 0, &c), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn generation_index_checked() {
        let tr = trace(&[5], 3, 2);
        let c = cfg(Segment::Generated, FeatureGroup::Output, 3, 2);
        assert!(matches!(
            assemble_features(&tr, 3, &c),
            Err(Error::GenerationOutOfRange { .. })
        ));
    }

    #[test]
    fn training_pairs_share_prompt_target() {
        let traces = vec![trace(&[4; 10], 3, 2), trace(&[5; 10], 3, 2), trace(&[6; 10], 3, 2)];
        let c = cfg(Segment::Generated, FeatureGroup::Output, 3, 2);
        let pairs = build_training_pairs(&traces, &c, TargetKind::Pe).unwrap();
        assert_eq!(pairs.len(), 30);
        let expected = uncertainty_target(&traces[1]).unwrap().pe_norm;
        assert!(pairs[10..20].iter().all(|p| p.target.to_bits() == expected.to_bits()));
        assert_eq!(pairs[13].features.gen_index, 3);
    }

    #[test]
    fn feature_names_match_vector_length() {
        for group in [FeatureGroup::Output, FeatureGroup::Logitlens, FeatureGroup::Combined] {
            let c = cfg(Segment::Generated, group, 5, 3);
            assert_eq!(c.feature_names().len(), c.vector_len());
        }
        let names = cfg(Segment::Generated, FeatureGroup::Combined, 3, 3).feature_names();
        assert_eq!(&names[..4], &[
            "generated.0.max_prob",
            "generated.0.entropy",
            "generated.0.logitlens_kl.1",
            "generated.0.logitlens_kl.2"
        ]);
    }
}
