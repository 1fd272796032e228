//! The JSON run config: one section per subcommand plus shared paths.
//! Unknown keys are rejected at every level; flags override file values.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use probelab::model::Preset;
use probelab::objectives::{ObjectiveKind, RandomLabelMode};
use probelab::probing::{ProbeConfig, DEFAULT_SENTLEN_BINS};
use probelab::tokenizer::DEFAULT_VOCAB_SIZE;
use probelab::training::{AdamConfig, Headline, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: Option<u64>,
    pub paths: Paths,
    pub synth_corpus: SynthSection,
    pub tokenizer_train: TokenizerSection,
    pub shard: ShardSection,
    pub pretrain: PretrainSection,
    pub probe: ProbeConfig,
    pub synthetic_tasks: SyntheticTasksSection,
    pub finetune: FinetuneSection,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub shard: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub tasks: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub docs: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { docs: 200 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    pub lowercase: bool,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { vocab_size: DEFAULT_VOCAB_SIZE, lowercase: true }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShardSection {
    pub objective: ObjectiveKind,
    pub max_len: usize,
    pub epochs: u64,
    pub random_labels: RandomLabelMode,
}

impl Default for ShardSection {
    fn default() -> Self {
        Self { objective: ObjectiveKind::Mlm, max_len: 128, epochs: 1, random_labels: RandomLabelMode::Fixed }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub objective: ObjectiveKind,
    pub preset: Preset,
    pub max_len: usize,
    pub tied_embeddings: bool,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Defaults to `min(10000, steps / 10)` when unset.
    pub warmup_steps: Option<u64>,
    pub weight_decay: f64,
    pub dropout_p: f64,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
    pub random_labels: RandomLabelMode,
    pub log_every: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            objective: t.objective,
            preset: Preset::Base,
            max_len: 128,
            tied_embeddings: true,
            steps: t.steps,
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            warmup_steps: None,
            weight_decay: t.weight_decay,
            dropout_p: t.dropout_p,
            adam: t.adam,
            grad_clip: t.grad_clip,
            random_labels: t.random_labels,
            log_every: 100,
        }
    }
}

impl PretrainSection {
    pub fn train_config(&self, master_seed: u64) -> TrainConfig {
        let default_warmup = TrainConfig::default().warmup_steps;
        TrainConfig {
            objective: self.objective,
            steps: self.steps,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps.unwrap_or(default_warmup.min(self.steps / 10)),
            weight_decay: self.weight_decay,
            dropout_p: self.dropout_p,
            adam: self.adam,
            master_seed,
            grad_clip: self.grad_clip,
            random_labels: self.random_labels,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTasksSection {
    /// Examples per split: train, validation, test.
    pub sizes: [usize; 3],
    pub sentlen_bins: Vec<(usize, usize)>,
    /// Grammar sentences generated as the bigram-shift source pool.
    pub source_sentences: usize,
}

impl Default for SyntheticTasksSection {
    fn default() -> Self {
        Self { sizes: [4000, 1000, 2000], sentlen_bins: DEFAULT_SENTLEN_BINS.to_vec(), source_sentences: 8000 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    /// Required: there is no published value to default to.
    pub lr: Option<f64>,
    /// Required, like `lr`.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub dropout_p: f64,
    pub seeds: Vec<u64>,
    pub regression: bool,
    /// Defaults to accuracy for classification, spearman for regression.
    pub headline: Option<Headline>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: None,
            batch_size: None,
            max_epochs: t.max_epochs,
            patience: t.patience,
            warmup_steps: 0,
            weight_decay: t.weight_decay,
            dropout_p: t.dropout_p,
            seeds: vec![1, 2, 3, 4, 5],
            regression: false,
            headline: None,
        }
    }
}

pub fn load(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

/// Parses a flag value through the type's serde representation, so flags
/// and config files accept the same spellings.
pub fn parse_value<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
