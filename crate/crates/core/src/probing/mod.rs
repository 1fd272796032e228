//! Layer-wise probing of frozen `[CLS]` representations.

mod data;
mod extract;
mod probe;
mod report;

pub use data::{
    gen_synthetic_bshift, gen_synthetic_sentlen, load_task_tsv, parse_task_tsv, ProbeExample, ProbeTaskDataset, Split,
    DEFAULT_SENTLEN_BINS,
};
pub use extract::{extract_cls_reps, wrap_sentence, LayerReps};
pub use probe::{train_probe, Labeled, Probe};
pub use report::{
    aggregate_entries, aggregate_runs, probe_all_layers, probe_reps, select_best_layer, Cell, ComparisonGrid,
    GridEntry, LayerResult, ProbeReport, SeedResult,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("missing split {0}")]
    MissingSplit(Split),
    #[error("no source sentence has four or more words")]
    TooShortCorpus,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("probe training labels need at least two classes")]
    SingleClass,
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("mismatched reports: {0}")]
    Mismatch(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;

/// Which split picks the reported layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[default]
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub selection: Selection,
    /// Z-score features with train-split statistics before fitting.
    pub standardize: bool,
    /// Probe the embedding output as layer 0.
    pub include_embeddings: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 50,
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            seeds: vec![1, 2, 3],
            selection: Selection::Validation,
            standardize: true,
            include_embeddings: false,
        }
    }
}
