use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{Headline, Metrics};
use super::{adam_step, clip_grad_norm, lr_at, OptimState, Result, TrainConfig, TrainError};
use crate::model::{Batch, Checkpoint, HeadSpec, Model, Targets};
use crate::rng::{self, tags};
use crate::tensor::Tape;
use crate::tokenizer::{TokenId, CLS, PAD, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskLabel {
    Class(usize),
    Score(f64),
}

/// One sentence or sentence pair, already tokenized (no specials).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub a: Vec<TokenId>,
    pub b: Option<Vec<TokenId>>,
    pub label: TaskLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub kind: TaskKind,
    pub headline: Headline,
    pub train: Vec<TaskExample>,
    pub validation: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

/// Result of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub epochs_run: usize,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub validation: Metrics,
    pub test: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub checkpoint_id: String,
    /// Pre-training objective of the checkpoint, if recorded.
    pub objective: Option<String>,
    pub task: String,
    pub headline: Headline,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
    /// Mean and sample standard deviation of the validation metrics.
    pub mean: Metrics,
    pub std: Metrics,
    pub test_mean: Option<Metrics>,
    pub test_std: Option<Metrics>,
}

/// `CLS a SEP [b SEP]` with segment ids, PAD-extended to `max_len`. The
/// longer segment loses tokens from its end first.
pub fn encode_pair(a: &[TokenId], b: Option<&[TokenId]>, max_len: usize) -> (Vec<TokenId>, Vec<u32>) {
    let specials = if b.is_some() { 3 } else { 2 };
    let budget = max_len.saturating_sub(specials);
    let (mut la, mut lb) = (a.len(), b.map_or(0, <[TokenId]>::len));
    while la + lb > budget {
        if la >= lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend_from_slice(&a[..la]);
    ids.push(SEP);
    let mut types = vec![0u32; ids.len()];
    if let Some(b) = b {
        ids.extend_from_slice(&b[..lb]);
        ids.push(SEP);
        types.resize(ids.len(), 1);
    }
    ids.resize(max_len, PAD);
    types.resize(max_len, 0);
    (ids, types)
}

struct Prepared {
    ids: Vec<TokenId>,
    types: Vec<u32>,
    label: TaskLabel,
}

fn prepare(examples: &[TaskExample], max_len: usize) -> Vec<Prepared> {
    examples
        .iter()
        .map(|e| {
            let (ids, types) = encode_pair(&e.a, e.b.as_deref(), max_len);
            Prepared { ids, types, label: e.label }
        })
        .collect()
}

fn to_batch(items: &[&Prepared]) -> Result<Batch> {
    let rows: Vec<&[TokenId]> = items.iter().map(|p| p.ids.as_slice()).collect();
    let types = items.iter().flat_map(|p| p.types.iter().copied()).collect();
    Ok(Batch::new(&rows)?.with_token_types(types)?)
}

fn evaluate(model: &Model<f32>, data: &[Prepared], kind: TaskKind, batch_size: usize) -> Result<Metrics> {
    let mut class_preds = Vec::new();
    let mut class_golds = Vec::new();
    let mut score_preds = Vec::new();
    let mut score_golds = Vec::new();
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let logits = model.forward(&to_batch(&refs)?)?.head_logits.expect("sequence head");
        for (p, item) in chunk.iter().enumerate() {
            let row = logits.row(p);
            match item.label {
                TaskLabel::Class(c) => {
                    let arg = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                        .map_or(0, |(i, _)| i);
                    class_preds.push(arg);
                    class_golds.push(c);
                }
                TaskLabel::Score(s) => {
                    score_preds.push(row[0] as f64);
                    score_golds.push(s);
                }
            }
        }
    }
    Ok(match kind {
        TaskKind::Classification { classes } => Metrics::classification(&class_preds, &class_golds, classes)?,
        TaskKind::Regression => Metrics::regression(&score_preds, &score_golds)?,
    })
}

fn check_labels(data: &TaskDataset) -> Result<()> {
    let all = data.train.iter().chain(&data.validation).chain(&data.test);
    for e in all {
        let ok = match (data.kind, e.label) {
            (TaskKind::Classification { classes }, TaskLabel::Class(c)) => c < classes,
            (TaskKind::Regression, TaskLabel::Score(s)) => s.is_finite(),
            _ => false,
        };
        if !ok {
            return Err(TrainError::InvalidConfig(format!(
                "label {:?} does not fit {:?} task {}",
                e.label, data.kind, data.name
            )));
        }
    }
    Ok(())
}

/// Fine-tunes the whole model plus a fresh sequence head for one seed,
/// keeping the parameters of the best validation epoch.
///
/// Training stops after the first epoch at which more than `cfg.patience`
/// consecutive epochs have passed without a strict improvement of the
/// headline metric, or after `cfg.max_epochs`.
pub fn finetune_seed(ckpt: &Checkpoint, data: &TaskDataset, cfg: &TrainConfig, seed: u64) -> Result<RunResult> {
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit(format!("{}: train", data.name)));
    }
    if data.validation.is_empty() {
        return Err(TrainError::EmptySplit(format!("{}: validation", data.name)));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || !(cfg.peak_lr > 0.0) {
        return Err(TrainError::InvalidConfig("fine-tuning needs positive batch_size, max_epochs and peak_lr".into()));
    }
    check_labels(data)?;
    let classes = match data.kind {
        TaskKind::Classification { classes } => classes,
        TaskKind::Regression => 1,
    };
    let mut model =
        ckpt.model.with_head(HeadSpec::Sequence { classes }, rng::derive_seed(seed, tags::FINETUNE, &[0]))?;
    model.set_dropout(cfg.dropout_p);
    let max_len = model.config().max_len;
    let train = prepare(&data.train, max_len);
    let validation = prepare(&data.validation, max_len);
    let test = prepare(&data.test, max_len);

    let per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.max_epochs as u64;
    let warmup = cfg.warmup_steps.min(total);
    let mut state = OptimState::new(model.params());
    let mut best: Option<(f64, Model<f32>, usize, Metrics)> = None;
    let mut since_best = 0usize;
    let mut step = 0u64;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(seed, tags::FINETUNE, &[1, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = to_batch(&items)?;
            let mut drop_rng = rng::stream(seed, tags::FINETUNE, &[2, step]);
            let mut tape = Tape::training();
            let enc = model.encode(&mut tape, &batch, &mut drop_rng)?;
            let classes_v: Vec<i64>;
            let scores_v: Vec<f64>;
            let targets = match data.kind {
                TaskKind::Classification { .. } => {
                    classes_v = items
                        .iter()
                        .map(|p| match p.label {
                            TaskLabel::Class(c) => c as i64,
                            TaskLabel::Score(_) => unreachable!("labels checked"),
                        })
                        .collect();
                    Targets::Classes(&classes_v)
                }
                TaskKind::Regression => {
                    scores_v = items
                        .iter()
                        .map(|p| match p.label {
                            TaskLabel::Score(s) => s,
                            TaskLabel::Class(_) => unreachable!("labels checked"),
                        })
                        .collect();
                    Targets::Scores(&scores_v)
                }
            };
            let loss = model.head_loss(&mut tape, enc.last(), targets, &mut drop_rng)?;
            if !tape.value(loss).item().is_finite() {
                return Err(TrainError::NonFiniteLoss { step, last_good: Box::new(Checkpoint::new(model.clone())) });
            }
            tape.backward(loss)?;
            model.params_mut().zero_grad();
            tape.flush_grads(model.params_mut());
            drop(tape);
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(model.params_mut(), max);
            }
            adam_step(model.params_mut(), &mut state, lr_at(step, cfg.peak_lr, warmup, total), cfg)?;
        }
        let metrics = evaluate(&model, &validation, data.kind, cfg.batch_size)?;
        let score = metrics.get(data.headline).unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, model.clone(), epoch, metrics));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    let (_, best_model, best_epoch, validation_metrics) = best.expect("at least one epoch");
    let test_metrics =
        if test.is_empty() { None } else { Some(evaluate(&best_model, &test, data.kind, cfg.batch_size)?) };
    Ok(RunResult { seed, epochs_run, best_epoch, validation: validation_metrics, test: test_metrics })
}

/// Repeats [`finetune_seed`] per seed and aggregates with sample std.
pub fn finetune(ckpt: &Checkpoint, data: &TaskDataset, cfg: &TrainConfig, seeds: &[u64]) -> Result<EvalMetrics> {
    if seeds.is_empty() {
        return Err(TrainError::InvalidConfig("no fine-tuning seeds".into()));
    }
    let runs = seeds.iter().map(|&s| finetune_seed(ckpt, data, cfg, s)).collect::<Result<Vec<_>>>()?;
    let val: Vec<Metrics> = runs.iter().map(|r| r.validation.clone()).collect();
    let (mean, std) = Metrics::aggregate(&val);
    let tests: Option<Vec<Metrics>> = runs.iter().map(|r| r.test.clone()).collect();
    let (test_mean, test_std) = match tests {
        Some(t) => {
            let (m, s) = Metrics::aggregate(&t);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    Ok(EvalMetrics {
        checkpoint_id: ckpt.content_hash(),
        objective: ckpt.objective.map(|o| o.name().to_string()),
        task: data.name.clone(),
        headline: data.headline,
        seeds: seeds.to_vec(),
        runs,
        mean,
        std,
        test_mean,
        test_std,
    })
}
