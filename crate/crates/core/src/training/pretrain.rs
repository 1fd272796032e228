use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::{adam_step, clip_grad_norm, OptimState, Result, TrainConfig, TrainError};
use crate::model::{Batch, Checkpoint, HeadSpec, Model, ModelError, Targets};
use crate::objectives::{ExampleGenerator, TrainingExample};
use crate::rng::{self, tags};
use crate::tensor::Tape;
use crate::tokenizer::PackedSequence;

/// Where training examples come from.
#[derive(Clone, Copy, Debug)]
pub enum ExampleSource<'a> {
    /// Fresh corruption every epoch.
    Generated { generator: ExampleGenerator<'a>, sequences: &'a [PackedSequence] },
    /// A fixed pool, e.g. read from a shard; reshuffled every pass.
    Fixed(&'a [TrainingExample]),
}

impl ExampleSource<'_> {
    fn epoch(&self, epoch: u64) -> Result<Vec<TrainingExample>> {
        match self {
            Self::Generated { generator, sequences } => Ok(generator.generate_epoch(sequences, epoch)?.0),
            Self::Fixed(pool) => Ok(pool.to_vec()),
        }
    }
}

/// Endless, deterministic batch stream: each epoch is shuffled with a seed
/// derived from `(master_seed, epoch)` and batches run across epoch edges.
pub struct ExampleStream<'a> {
    source: ExampleSource<'a>,
    master_seed: u64,
    epoch: u64,
    buffer: Vec<TrainingExample>,
    cursor: usize,
    consumed: u64,
}

impl<'a> ExampleStream<'a> {
    pub fn new(source: ExampleSource<'a>, master_seed: u64) -> Self {
        Self { source, master_seed, epoch: 0, buffer: Vec::new(), cursor: 0, consumed: 0 }
    }

    fn refill(&mut self) -> Result<()> {
        let mut pool = self.source.epoch(self.epoch)?;
        if pool.is_empty() {
            return Err(TrainError::EmptySplit("no usable training examples".into()));
        }
        pool.shuffle(&mut rng::stream(self.master_seed, tags::EPOCH_SHUFFLE, &[self.epoch]));
        self.buffer = pool;
        self.cursor = 0;
        self.epoch += 1;
        Ok(())
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Vec<TrainingExample>> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.buffer.len() {
                self.refill()?;
            }
            out.push(self.buffer[self.cursor].clone());
            self.cursor += 1;
        }
        self.consumed += size as u64;
        Ok(out)
    }

    /// Examples delivered so far.
    pub fn consumed(&self) -> u64 {
        self.consumed
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    /// Mean loss over the first `window` steps.
    pub fn head_mean(&self, window: usize) -> f64 {
        let w = &self.points[..window.min(self.points.len())];
        w.iter().map(|p| p.loss).sum::<f64>() / w.len() as f64
    }

    /// Mean loss over the last `window` steps.
    pub fn tail_mean(&self, window: usize) -> f64 {
        let w = &self.points[self.points.len() - window.min(self.points.len())..];
        w.iter().map(|p| p.loss).sum::<f64>() / w.len() as f64
    }

    pub fn at(&self, step: u64) -> Option<f64> {
        self.points.iter().find(|p| p.step == step).map(|p| p.loss)
    }

    /// `step,lr,loss` rows every `every` steps; each loss is the mean since
    /// the previous row.
    pub fn to_csv(&self, every: u64) -> String {
        let mut out = String::from("step,lr,loss\n");
        let mut acc = 0.0;
        let mut n = 0usize;
        for (i, p) in self.points.iter().enumerate() {
            acc += p.loss;
            n += 1;
            if p.step % every.max(1) == 0 || i + 1 == self.points.len() {
                let _ = writeln!(out, "{},{:e},{}", p.step, p.lr, acc / n as f64);
                acc = 0.0;
                n = 0;
            }
        }
        out
    }
}

pub struct Pretrained {
    pub checkpoint: Checkpoint,
    pub curve: LossCurve,
}

pub(crate) fn token_batch(examples: &[TrainingExample]) -> Result<(Batch, Vec<i64>)> {
    let batch = Batch::new(&examples.iter().map(|e| e.input_ids.as_slice()).collect::<Vec<_>>())?;
    let labels = examples
        .iter()
        .flat_map(|e| e.labels.iter().zip(&e.loss_mask))
        .map(|(&l, &m)| if m == 1 { l as i64 } else { crate::tensor::IGNORE })
        .collect();
    Ok((batch, labels))
}

/// Mean token loss over `examples` in eval mode, weighted by supervised
/// positions.
pub fn eval_loss(model: &Model<f32>, examples: &[TrainingExample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let (batch, labels) = token_batch(chunk)?;
        let n = labels.iter().filter(|&&l| l != crate::tensor::IGNORE).count();
        if n == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let enc = model.encode(&mut tape, &batch, &mut no_rng)?;
        let loss = model.head_loss(&mut tape, enc.last(), Targets::Tokens(&labels), &mut no_rng)?;
        total += tape.value(loss).item() as f64 * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(TrainError::EmptySplit("no supervised positions to evaluate".into()));
    }
    Ok(total / count as f64)
}

/// Runs exactly `cfg.steps` optimizer updates. `progress` sees every step.
pub fn pretrain(
    mut model: Model<f32>,
    source: ExampleSource<'_>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LossPoint),
) -> Result<Pretrained> {
    cfg.validate()?;
    let expected = HeadSpec::for_objective(cfg.objective, model.config().vocab_size);
    if model.config().head != expected {
        return Err(ModelError::HeadMismatch(format!(
            "{} objective needs {expected:?}, model has {:?}",
            cfg.objective,
            model.config().head
        ))
        .into());
    }
    model.set_dropout(cfg.dropout_p);
    let mut stream = ExampleStream::new(source, cfg.master_seed);
    let mut state = OptimState::new(model.params());
    let mut curve = LossCurve::default();
    let snapshot = |model: &Model<f32>, step: u64, consumed: u64| Checkpoint {
        model: model.clone(),
        step,
        objective: Some(cfg.objective),
        vocab_hash: None,
        rng_state: consumed,
    };

    for step in 1..=cfg.steps {
        let examples = stream.next_batch(cfg.batch_size)?;
        let (batch, labels) = token_batch(&examples)?;
        let mut dropout_rng = rng::stream(cfg.master_seed, tags::DROPOUT, &[step]);
        let mut tape = Tape::training();
        let enc = model.encode(&mut tape, &batch, &mut dropout_rng)?;
        let loss = model.head_loss(&mut tape, enc.last(), Targets::Tokens(&labels), &mut dropout_rng)?;
        let loss_value = tape.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                last_good: Box::new(snapshot(&model, step - 1, stream.consumed())),
            });
        }
        tape.backward(loss)?;
        model.params_mut().zero_grad();
        tape.flush_grads(model.params_mut());
        drop(tape);
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(model.params_mut(), max);
        }
        let lr = cfg.lr_at(step);
        adam_step(model.params_mut(), &mut state, lr, cfg)?;
        let point = LossPoint { step, lr, loss: loss_value };
        progress(&point);
        curve.points.push(point);
    }
    let consumed = stream.consumed();
    Ok(Pretrained { checkpoint: snapshot(&model, cfg.steps, consumed), curve })
}
