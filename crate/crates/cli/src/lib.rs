//! Command-line front end. Flags override values from `--config`; every
//! command writes a bundle of outputs plus a manifest to `--out`.

pub mod bundle;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

pub use bundle::Bundle;
pub use commands::{Outcome, SweepKind};
pub use config::{RunConfig, ScoreMode};

#[derive(Debug, Parser)]
#[command(name = "uqlink", version, about = "Uncertainty estimation for table entity linking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trace set and matching dataset.
    Synth(Common),
    /// Check trace files against the wire-format invariants.
    Validate(Common),
    /// Per-prompt uncertainty targets and the feature matrix.
    Targets(Common),
    /// Fit a forest on one trace set.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also report grouped k-fold cross-validation.
        #[arg(long)]
        cv: bool,
    },
    /// Score every generation with a trained model.
    Predict(Common),
    /// ROC, budget, recoverability and correlation tables.
    Evaluate(Common),
    /// Parameter sweeps.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Trace files (or, for the temperature sweep, directories of them).
    #[arg(long, num_args = 1..)]
    pub traces: Vec<PathBuf>,
    /// TOML or JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; must not exist unless --force.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// CSV with prompt_id and score columns.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// postilla, generated or window.
    #[arg(long)]
    pub segment: Option<String>,
    /// output, logitlens or combined.
    #[arg(long)]
    pub group: Option<String>,
    #[arg(long)]
    pub window_end: Option<usize>,
    /// pe or se.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Point count or comma-separated budgets in [0, 1].
    #[arg(long)]
    pub budget_grid: Option<String>,
    #[arg(long)]
    pub resamples: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, value_enum)]
    pub score_mode: Option<ScoreMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthetic prompt count.
    #[arg(long)]
    pub prompts: Option<usize>,
    /// Synthetic sampling temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub trees: Option<usize>,
}

fn parse_name<T: DeserializeOwned>(flag: &str, value: &str) -> anyhow::Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_owned()))
        .with_context(|| format!("invalid value {value:?} for --{flag}"))
}

impl Common {
    /// Base config from `--config` with flag overrides applied.
    pub fn to_config(&self, command: &str) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.command = command.to_owned();
        if !self.traces.is_empty() {
            cfg.traces = self.traces.clone();
        }
        if self.model.is_some() {
            cfg.model = self.model.clone();
        }
        if self.scores.is_some() {
            cfg.scores = self.scores.clone();
        }
        if let Some(s) = &self.segment {
            cfg.features.segment = parse_name("segment", s)?;
        }
        if let Some(g) = &self.group {
            cfg.features.group = parse_name("group", g)?;
        }
        if self.window_end.is_some() {
            cfg.features.window_end = self.window_end;
        }
        if let Some(t) = &self.target {
            cfg.target = parse_name("target", t)?;
        }
        if let Some(v) = self.threshold {
            cfg.evaluation.threshold = v;
        }
        if let Some(v) = &self.budget_grid {
            cfg.evaluation.budget_grid = v.clone();
        }
        if let Some(v) = self.resamples {
            cfg.evaluation.resamples = v;
        }
        if let Some(v) = self.folds {
            cfg.evaluation.k = v;
        }
        if let Some(v) = self.score_mode {
            cfg.evaluation.score_mode = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.prompts {
            cfg.synth.n_prompts = v;
        }
        if let Some(v) = self.temperature {
            cfg.synth.temperature = v;
        }
        if let Some(v) = self.trees {
            cfg.forest.n_trees = v;
        }
        Ok(cfg.resolved())
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c)
            | Command::Validate(c)
            | Command::Targets(c)
            | Command::Predict(c)
            | Command::Evaluate(c) => c,
            Command::Train { common, .. } | Command::Sweep { common, .. } => common,
        }
    }

    fn name(&self) -> String {
        match self {
            Command::Synth(_) => "synth".into(),
            Command::Validate(_) => "validate".into(),
            Command::Targets(_) => "targets".into(),
            Command::Train { .. } => "train".into(),
            Command::Predict(_) => "predict".into(),
            Command::Evaluate(_) => "evaluate".into(),
            Command::Sweep { kind, .. } => format!("sweep-{}", format!("{kind:?}").to_lowercase()),
        }
    }
}

/// Runs a command against a resolved config and returns its bundle.
pub fn execute(command: &Command, cfg: &RunConfig) -> anyhow::Result<Outcome> {
    match command {
        Command::Synth(_) => commands::cmd_synth(cfg),
        Command::Validate(_) => commands::cmd_validate(cfg),
        Command::Targets(_) => commands::cmd_targets(cfg),
        Command::Train { cv, .. } => commands::cmd_train(cfg, *cv),
        Command::Predict(_) => commands::cmd_predict(cfg),
        Command::Evaluate(_) => commands::cmd_evaluate(cfg),
        Command::Sweep { kind, .. } => commands::cmd_sweep(cfg, *kind),
    }
}

/// Resolved config for a parsed command: `--config` plus flag overrides.
pub fn resolve(command: &Command) -> anyhow::Result<RunConfig> {
    command.common().to_config(&command.name())
}

/// Parses `args`, runs the command and commits its bundle. Returns the
/// outcome so callers can choose an exit code.
pub fn run<I, T>(args: I) -> anyhow::Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    let common = cli.command.common();
    let cfg = resolve(&cli.command)?;
    let out = common
        .out
        .clone()
        .ok_or_else(|| anyhow::anyhow!("--out is required"))?;
    let outcome = execute(&cli.command, &cfg)?;
    outcome.bundle.commit(&out, &cfg, common.force)?;
    Ok(outcome)
}

/// Short machine-readable name for an error chain.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<uqlink::Error>() {
            return e.kind();
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return "usage";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "failure"
}
