use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("model has no batch-normalization layers")]
    NoNormalizationLayers,
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },
    #[error("synthesis diverged at iteration {iteration} of IPC round {round}")]
    SynthesisDiverged { round: usize, iteration: usize },
    #[error("invalid committee subset size {n}{}", committee.map(|c| format!(" for a committee of {c}")).unwrap_or_default())]
    InvalidSubsetSize { n: usize, committee: Option<usize> },
    #[error("invalid prior score: {0}")]
    InvalidScore(String),
    #[error("no prior score for `{0}`")]
    MissingPrior(String),
    #[error("committee incomplete: {0}")]
    IncompleteCommittee(String),
    #[error("momentum {0} outside [0, 1]")]
    InvalidMomentum(f64),
    #[error("degenerate normalization: {0}")]
    DegenerateNormalization(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("step {step} outside [0, {total}]")]
    Range { step: usize, total: usize },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("incomplete log: {0}")]
    IncompleteLog(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("unknown ablation preset `{0}`")]
    UnknownPreset(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// The configuration or arguments are invalid.
    Config,
    /// A required upstream artifact is missing or does not match.
    Dependency,
    /// Anything that went wrong while running.
    Runtime,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::UnknownArchitecture(_)
            | Error::UnknownPreset(_)
            | Error::InvalidSubsetSize { .. }
            | Error::InvalidMomentum(_) => ErrorClass::Config,
            Error::Dependency(_) | Error::MissingPrior(_) | Error::IncompleteCommittee(_) => ErrorClass::Dependency,
            _ => ErrorClass::Runtime,
        }
    }
}
