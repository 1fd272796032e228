use rand::RngCore;

use super::{HeadIds, HeadSpec, Model, ModelError, Result};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var, IGNORE};

/// Supervision for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets<'a> {
    /// One label per position, [`IGNORE`] where unsupervised.
    Tokens(&'a [i64]),
    /// One class per sequence.
    Classes(&'a [i64]),
    /// One real target per sequence.
    Scores(&'a [f64]),
}

impl<T: Real> Model<T> {
    /// Logits of the configured head. Token heads yield `[batch, seq_len, K]`,
    /// the sequence head yields `[batch, C]`.
    pub fn head_logits(&self, tape: &mut Tape<T>, hidden: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let shape = tape.shape(hidden).to_vec();
        match &self.ids.head {
            HeadIds::None => Err(ModelError::HeadMismatch("model has no head".into())),
            HeadIds::Sequence { .. } => self.sequence_logits(tape, hidden, rng),
            _ => {
                let rows: Vec<usize> = (0..shape[0] * shape[1]).collect();
                let logits = self.token_logits(tape, hidden, &rows)?;
                let k = *tape.shape(logits).last().expect("rank 2");
                Ok(tape.reshape(logits, &[shape[0], shape[1], k])?)
            }
        }
    }

    /// Token-head logits `[rows.len(), K]` for the flattened positions `rows`.
    pub fn token_logits(&self, tape: &mut Tape<T>, hidden: Var, rows: &[usize]) -> Result<Var> {
        let shape = tape.shape(hidden).to_vec();
        let flat = tape.reshape(hidden, &[shape[0] * shape[1], shape[2]])?;
        let h = tape.index_select(flat, rows)?;
        match self.ids.head {
            HeadIds::Mlm { transform, norm, decoder, bias } => {
                let t = self.linear(tape, h, transform)?;
                let t = tape.gelu(t);
                let t = self.norm(tape, t, norm)?;
                let logits = match decoder {
                    Some(w) => {
                        let w = tape.param(&self.params, w);
                        tape.matmul(t, w)?
                    }
                    None => {
                        let w = tape.param(&self.params, self.ids.word);
                        tape.matmul_t(t, w)?
                    }
                };
                let b = tape.param(&self.params, bias);
                Ok(tape.add(logits, b)?)
            }
            HeadIds::Token { proj } => self.linear(tape, h, proj),
            _ => Err(ModelError::HeadMismatch("token logits need a token head".into())),
        }
    }

    /// Tanh pooler on the final `[CLS]` state, then the classifier.
    pub fn sequence_logits(&self, tape: &mut Tape<T>, hidden: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let HeadIds::Sequence { pooler, classifier } = self.ids.head else {
            return Err(ModelError::HeadMismatch("sequence logits need a sequence head".into()));
        };
        let cls = self.cls(tape, hidden)?;
        let p = self.linear(tape, cls, pooler)?;
        let p = tape.tanh(p);
        let p = tape.dropout(p, self.config.dropout_p, rng)?;
        self.linear(tape, p, classifier)
    }

    /// Scalar training loss of the head against `targets`. Token heads only
    /// evaluate the supervised rows.
    pub fn head_loss(
        &self,
        tape: &mut Tape<T>,
        hidden: Var,
        targets: Targets<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let classes = self.config.label_space();
        match (&self.config.head, targets) {
            (HeadSpec::Mlm | HeadSpec::Token { .. }, Targets::Tokens(labels)) => {
                let shape = tape.shape(hidden);
                if labels.len() != shape[0] * shape[1] {
                    return Err(TensorError::ShapeMismatch {
                        op: "head_loss",
                        left: shape[..2].to_vec(),
                        right: vec![labels.len()],
                    }
                    .into());
                }
                let k = classes.expect("token head has classes") as i64;
                let mut rows = Vec::new();
                let mut picked = Vec::new();
                for (i, &l) in labels.iter().enumerate() {
                    if l == IGNORE {
                        continue;
                    }
                    if !(0..k).contains(&l) {
                        return Err(TensorError::LabelOutOfRange { label: l, classes: k as usize }.into());
                    }
                    rows.push(i);
                    picked.push(l);
                }
                if rows.is_empty() {
                    return Err(TensorError::NoSupervisedPositions.into());
                }
                let logits = self.token_logits(tape, hidden, &rows)?;
                Ok(tape.cross_entropy(logits, &picked)?)
            }
            (HeadSpec::Sequence { classes }, Targets::Classes(labels)) if *classes > 1 => {
                let logits = self.sequence_logits(tape, hidden, rng)?;
                Ok(tape.cross_entropy(logits, labels)?)
            }
            (HeadSpec::Sequence { classes: 1 }, Targets::Scores(scores)) => {
                let pred = self.sequence_logits(tape, hidden, rng)?;
                let values: Vec<f64> = scores.to_vec();
                let target = tape.constant(Tensor::from_f64(&[values.len(), 1], &values)?);
                let diff = tape.sub(pred, target)?;
                let sq = tape.mul(diff, diff)?;
                Ok(tape.mean(sq))
            }
            (head, t) => Err(ModelError::HeadMismatch(format!(
                "{head:?} head cannot be trained on {} targets",
                match t {
                    Targets::Tokens(_) => "per-token",
                    Targets::Classes(_) => "class",
                    Targets::Scores(_) => "score",
                }
            ))),
        }
    }
}
