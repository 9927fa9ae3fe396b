//! Run configuration: everything that determines a command's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use uqlink::eval::parse_budget_grid;
use uqlink::features::{FeatureConfig, FeatureGroup, Segment, DEFAULT_GENERATED_TOKENS, DEFAULT_PAD_VALUE};
use uqlink::forest::ForestHyperparams;
use uqlink::measures::TargetKind;
use uqlink::stats::BootstrapSettings;
use uqlink::synth::SyntheticSpec;
use uqlink::trace::TraceMetadata;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureOptions {
    pub segment: Segment,
    pub group: FeatureGroup,
    pub generated_token_count: usize,
    pub window_end: Option<usize>,
    pub pad_value: f64,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            segment: Segment::Generated,
            group: FeatureGroup::Combined,
            generated_token_count: DEFAULT_GENERATED_TOKENS,
            window_end: None,
            pad_value: DEFAULT_PAD_VALUE,
        }
    }
}

impl FeatureOptions {
    pub fn config_for(&self, meta: &TraceMetadata) -> FeatureConfig {
        let mut cfg = FeatureConfig::for_metadata(meta, self.segment, self.group);
        cfg.generated_token_count = self.generated_token_count;
        cfg.window_end = self.window_end;
        cfg.pad_value = self.pad_value;
        cfg
    }
}

/// Score granularity used for the regressor's ROC curve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Mean of a prompt's generation scores.
    #[default]
    PerPrompt,
    /// Each generation scored on its own, labelled by its prompt.
    PerGeneration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub threshold: f64,
    /// Point count (`"101"`) or comma-separated budgets.
    pub budget_grid: String,
    pub resamples: usize,
    pub level: f64,
    pub k: usize,
    pub score_mode: ScoreMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: uqlink::eval::DEFAULT_LOW_ACCURACY_THRESHOLD,
            budget_grid: "101".into(),
            resamples: 1000,
            level: 0.95,
            k: 10,
            score_mode: ScoreMode::PerPrompt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    /// Truncation grid: generation counts `M`.
    pub generation_counts: Vec<usize>,
    /// Truncation grid: token caps `K`; an uncapped column is always added.
    pub token_caps: Vec<usize>,
    /// Progressive training sizes in prompts; empty means 10%, 20%, ... of
    /// the smallest training split.
    pub sizes: Vec<usize>,
    /// Growing-window ends; empty means every end from 1 to P + G.
    pub window_ends: Vec<usize>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            generation_counts: (1..=10).collect(),
            token_caps: vec![1, 2, 3, 5, 10],
            sizes: Vec::new(),
            window_ends: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub traces: Vec<PathBuf>,
    pub model: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub features: FeatureOptions,
    pub target: TargetKind,
    /// `forest.seed` is replaced by the run seed.
    pub forest: ForestHyperparams,
    pub evaluation: EvalOptions,
    pub sweep: SweepOptions,
    /// `synth.seed` is replaced by the run seed.
    pub synth: SyntheticSpec,
    /// Single seed for data generation, folds, forests, bootstrap and the random ranking.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            traces: Vec::new(),
            model: None,
            scores: None,
            features: FeatureOptions::default(),
            target: TargetKind::Pe,
            forest: ForestHyperparams::default(),
            evaluation: EvalOptions::default(),
            sweep: SweepOptions::default(),
            synth: SyntheticSpec::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Reads a TOML or JSON config, chosen by file extension.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display())),
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())),
            _ => bail!("config {} must end in .toml or .json", path.display()),
        }
    }

    /// Propagates the run seed into every seeded component.
    pub fn resolved(mut self) -> Self {
        self.forest.seed = self.seed;
        self.synth.seed = self.seed;
        self
    }

    pub fn bootstrap(&self) -> BootstrapSettings {
        BootstrapSettings {
            resamples: self.evaluation.resamples,
            level: self.evaluation.level,
            seed: self.seed,
        }
    }

    pub fn budget_grid(&self) -> anyhow::Result<Vec<f64>> {
        Ok(parse_budget_grid(&self.evaluation.budget_grid)?)
    }
}
