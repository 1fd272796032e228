use rand::RngCore;

use super::{HeadSpec, Model, ModelError, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::tokenizer::{TokenId, PAD};

/// A rectangular batch of token ids, row-major `[batch, seq_len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<TokenId>,
    pub token_types: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn new<R: AsRef<[TokenId]>>(rows: &[R]) -> Result<Self> {
        let seq_len = rows.first().map_or(0, |r| r.as_ref().len());
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        for r in rows {
            let r = r.as_ref();
            if r.len() != seq_len {
                return Err(ModelError::InvalidConfig(format!(
                    "ragged batch: row of {} tokens, expected {seq_len}",
                    r.len()
                )));
            }
            ids.extend_from_slice(r);
        }
        Ok(Self { token_types: vec![0; ids.len()], ids, batch: rows.len(), seq_len })
    }

    pub fn with_token_types(mut self, types: Vec<u32>) -> Result<Self> {
        if types.len() != self.ids.len() {
            return Err(ModelError::InvalidConfig("token type count differs from id count".into()));
        }
        self.token_types = types;
        Ok(self)
    }

    pub fn row(&self, b: usize) -> &[TokenId] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Additive attention bias `[batch, 1, 1, seq_len]`: 0 for real tokens,
    /// a large negative number on PAD keys.
    fn key_mask<T: Real>(&self) -> Tensor<T> {
        let data = self.ids.iter().map(|&id| if id == PAD { T::lit(-1e9) } else { T::zero() }).collect();
        Tensor::new(vec![self.batch, 1, 1, self.seq_len], data).expect("mask shape")
    }
}

/// Tape handles for one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    /// Embedding output, `[batch, seq_len, d_hidden]`.
    pub embeddings: Var,
    /// Output of each block, `[batch, seq_len, d_hidden]`.
    pub layers: Vec<Var>,
    /// Attention probabilities of each block, `[batch, heads, seq_len, seq_len]`.
    pub attention: Vec<Var>,
}

impl EncoderVars {
    pub fn last(&self) -> Var {
        *self.layers.last().unwrap_or(&self.embeddings)
    }
}

/// Plain-tensor result of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    /// `[batch, d_hidden]` per exported layer.
    pub cls_by_layer: Vec<Tensor<T>>,
    /// `[batch, seq_len, K]` for token heads, `[batch, C]` for sequence heads.
    pub head_logits: Option<Tensor<T>>,
    pub final_hidden: Tensor<T>,
    pub attention: Vec<Tensor<T>>,
}

impl<T: Real> Model<T> {
    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        if batch.seq_len > c.max_len || batch.batch == 0 || batch.seq_len == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "batch of {}×{} does not fit max_len {}",
                batch.batch, batch.seq_len, c.max_len
            )));
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(ModelError::IdOutOfRange { id, vocab_size: c.vocab_size });
        }
        if batch.token_types.iter().any(|&t| t as usize >= c.type_vocab_size) {
            return Err(ModelError::InvalidConfig("token type out of range".into()));
        }
        Ok(())
    }

    pub(crate) fn linear(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        (w, b): (crate::tensor::ParamId, crate::tensor::ParamId),
    ) -> Result<Var> {
        let w = tape.param(&self.params, w);
        let b = tape.param(&self.params, b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }

    /// Layer norm over the last axis followed by the learned affine map.
    pub(crate) fn norm(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        (g, b): (crate::tensor::ParamId, crate::tensor::ParamId),
    ) -> Result<Var> {
        let axis = tape.shape(x).len() - 1;
        let n = tape.layer_norm(x, axis, self.config.layer_norm_eps)?;
        let g = tape.param(&self.params, g);
        let b = tape.param(&self.params, b);
        let y = tape.mul(n, g)?;
        Ok(tape.add(y, b)?)
    }

    /// Runs the embedding layer and every block on `tape`. Dropout is
    /// active only when the tape is in training mode.
    pub fn encode(&self, tape: &mut Tape<T>, batch: &Batch, rng: &mut dyn RngCore) -> Result<EncoderVars> {
        self.check_batch(batch)?;
        let c = &self.config;
        let (bsz, len, d) = (batch.batch, batch.seq_len, c.d_hidden);
        let (heads, dh) = (c.n_heads, c.head_dim());

        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let types: Vec<usize> = batch.token_types.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..len).collect();
        let word = tape.param(&self.params, self.ids.word);
        let pos = tape.param(&self.params, self.ids.position);
        let ty = tape.param(&self.params, self.ids.token_type);
        let we = tape.index_select(word, &ids)?;
        let we = tape.reshape(we, &[bsz, len, d])?;
        let pe = tape.index_select(pos, &positions)?;
        let te = tape.index_select(ty, &types)?;
        let te = tape.reshape(te, &[bsz, len, d])?;
        let h = tape.add(we, pe)?;
        let h = tape.add(h, te)?;
        let h = self.norm(tape, h, self.ids.emb_norm)?;
        let embeddings = tape.dropout(h, c.dropout_p, rng)?;

        let mask = tape.constant(batch.key_mask());
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut x = embeddings;
        let mut layers = Vec::with_capacity(c.n_layers);
        let mut attention = Vec::with_capacity(c.n_layers);
        for block in &self.ids.blocks {
            let split = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
                let v = tape.reshape(v, &[bsz, len, heads, dh])?;
                Ok(tape.permute(v, &[0, 2, 1, 3])?)
            };
            let q = self.linear(tape, x, block.query)?;
            let q = split(tape, q)?;
            let wk = tape.param(&self.params, block.key);
            let k = tape.matmul(x, wk)?;
            let k = split(tape, k)?;
            let v = self.linear(tape, x, block.value)?;
            let v = split(tape, v)?;
            let scores = tape.matmul_t(q, k)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.add(scores, mask)?;
            let probs = tape.softmax(scores, 3)?;
            attention.push(probs);
            let probs = tape.dropout(probs, c.attention_dropout_p, rng)?;
            let ctx = tape.matmul(probs, v)?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[bsz, len, d])?;
            let out = self.linear(tape, ctx, block.output)?;
            let out = tape.dropout(out, c.dropout_p, rng)?;
            let res = tape.add(x, out)?;
            let a = self.norm(tape, res, block.attn_norm)?;

            let inner = self.linear(tape, a, block.inner)?;
            let inner = tape.gelu(inner);
            let outer = self.linear(tape, inner, block.outer)?;
            let outer = tape.dropout(outer, c.dropout_p, rng)?;
            let res = tape.add(a, outer)?;
            x = self.norm(tape, res, block.ffn_norm)?;
            layers.push(x);
        }
        Ok(EncoderVars { embeddings, layers, attention })
    }

    /// Position-0 state of `hidden`, `[batch, d_hidden]`.
    pub(crate) fn cls(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        let shape = tape.shape(hidden).to_vec();
        let first = tape.narrow(hidden, 1, 0, 1)?;
        Ok(tape.reshape(first, &[shape[0], shape[2]])?)
    }

    /// Inference pass without dropout.
    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let enc = self.encode(&mut tape, batch, &mut no_rng)?;
        let mut exported = Vec::with_capacity(enc.layers.len() + 1);
        if self.config.include_embedding_layer {
            exported.push(enc.embeddings);
        }
        exported.extend_from_slice(&enc.layers);
        let mut cls_by_layer = Vec::with_capacity(exported.len());
        for h in exported {
            let v = self.cls(&mut tape, h)?;
            cls_by_layer.push(tape.value(v).clone());
        }
        let last = enc.last();
        let head_logits = match self.config.head {
            HeadSpec::None => None,
            _ => {
                let v = self.head_logits(&mut tape, last, &mut no_rng)?;
                Some(tape.value(v).clone())
            }
        };
        Ok(ForwardOutput {
            cls_by_layer,
            head_logits,
            final_hidden: tape.value(last).clone(),
            attention: enc.attention.iter().map(|&a| tape.value(a).clone()).collect(),
        })
    }
}
