//! Pre-training and fine-tuning loops, optimizer and metrics.

mod finetune;
pub mod metrics;
mod optim;
mod pretrain;

pub use finetune::{
    encode_pair, finetune, finetune_seed, EvalMetrics, RunResult, TaskDataset, TaskExample, TaskKind, TaskLabel,
};
pub use metrics::{Headline, MetricError, Metrics};
pub use optim::{adam_step, clip_grad_norm, grad_norm, lr_at, AdamConfig, OptimState};
pub use pretrain::{eval_loss, pretrain, ExampleSource, ExampleStream, LossCurve, LossPoint, Pretrained};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Checkpoint, ModelError};
use crate::objectives::{ObjectiveError, ObjectiveKind, RandomLabelMode};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient at {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64, last_good: Box<Checkpoint> },
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    /// Hidden and attention dropout.
    pub dropout_p: f64,
    pub adam: AdamConfig,
    pub master_seed: u64,
    pub eval_every: u64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub random_labels: RandomLabelMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Mlm,
            steps: 500_000,
            batch_size: 32,
            peak_lr: 1e-4,
            warmup_steps: 10_000,
            weight_decay: 0.01,
            dropout_p: 0.1,
            adam: AdamConfig::default(),
            master_seed: 0,
            eval_every: 100,
            max_epochs: 20,
            patience: 3,
            grad_clip: None,
            random_labels: RandomLabelMode::Fixed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.warmup_steps > self.steps {
            return bad("warmup_steps exceeds steps");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        if !(self.peak_lr > 0.0) || !(self.adam.eps > 0.0) {
            return bad("learning rate and Adam epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.dropout_p) {
            return bad("weight_decay must be non-negative and dropout in [0, 1)");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(step, self.peak_lr, self.warmup_steps, self.steps)
    }
}
