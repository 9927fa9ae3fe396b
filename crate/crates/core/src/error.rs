use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed candidate {input:?}: {reason}")]
    MalformedCandidate { input: String, reason: &'static str },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: schema error: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("trace file {0} is empty (missing metadata line)")]
    EmptyTraceFile(PathBuf),

    #[error("generation {gen_index} of prompt {prompt_id} has a token without chosen_logprob")]
    MissingLogprob { prompt_id: String, gen_index: usize },

    #[error("empty generation list for prompt {0}")]
    NoGenerations(String),

    #[error("token lacks LogitLens features required by the selected feature group")]
    MissingLayerFeatures,

    #[error("feature config does not match trace: {0}")]
    ConfigMismatch(String),

    #[error("invalid feature config: {0}")]
    InvalidFeatureConfig(String),

    #[error("non-finite feature value at position {position} (prompt {prompt_id}, generation {gen_index})")]
    NonFiniteFeature {
        prompt_id: String,
        gen_index: usize,
        position: usize,
    },

    #[error("generation index {gen_index} out of range for prompt {prompt_id} ({available} generations)")]
    GenerationOutOfRange {
        prompt_id: String,
        gen_index: usize,
        available: usize,
    },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("too few groups: {groups} prompts for {folds} folds")]
    TooFewGroups { groups: usize, folds: usize },

    #[error("group leakage: prompt {0} appears in more than one fold")]
    GroupLeakage(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("unsupported model artifact version {found} (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },

    #[error("ROC analysis needs both classes present")]
    SingleClass,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },

    #[error("invalid budget grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedCandidate { .. } => "malformed_candidate",
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::EmptyTraceFile(_) => "empty_trace_file",
            Error::MissingLogprob { .. } => "missing_logprob",
            Error::NoGenerations(_) => "no_generations",
            Error::MissingLayerFeatures => "missing_layer_features",
            Error::ConfigMismatch(_) => "config_mismatch",
            Error::InvalidFeatureConfig(_) => "invalid_feature_config",
            Error::NonFiniteFeature { .. } => "non_finite_feature",
            Error::GenerationOutOfRange { .. } => "generation_out_of_range",
            Error::EmptyTrainingSet => "empty_training_set",
            Error::TooFewGroups { .. } => "too_few_groups",
            Error::GroupLeakage(_) => "group_leakage",
            Error::InvalidHyperparams(_) => "invalid_hyperparams",
            Error::ModelVersion { .. } => "model_version",
            Error::SingleClass => "single_class",
            Error::LengthMismatch(..) => "length_mismatch",
            Error::TooFewValues { .. } => "too_few_values",
            Error::InvalidGrid(_) => "invalid_grid",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
