use rayon::prelude::*;

use super::{ProbeError, Result};
use crate::model::{Batch, Model};
use crate::tensor::Tape;
use crate::tokenizer::{TokenId, Vocab, CLS, PAD, SEP};

/// `[CLS]` vectors of every sentence at every exported layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerReps {
    /// Layer numbers: 1..=n_layers, preceded by 0 when embeddings are included.
    pub layers: Vec<usize>,
    /// One row-major `n × dim` matrix per entry of `layers`.
    pub matrices: Vec<Vec<f32>>,
    pub n: usize,
    pub dim: usize,
    /// Sentences cut to fit `max_len − 2` tokens.
    pub truncated: usize,
}

impl LayerReps {
    pub fn row(&self, layer_idx: usize, i: usize) -> &[f32] {
        &self.matrices[layer_idx][i * self.dim..(i + 1) * self.dim]
    }
}

/// `CLS ids SEP PAD…`, cut to `max_len`; also reports whether it was cut.
pub fn wrap_sentence(vocab: &Vocab, sentence: &str, max_len: usize) -> (Vec<TokenId>, bool) {
    let mut ids = vocab.encode(sentence);
    let cut = ids.len() > max_len - 2;
    ids.truncate(max_len - 2);
    let mut row = Vec::with_capacity(max_len);
    row.push(CLS);
    row.extend(ids);
    row.push(SEP);
    row.resize(max_len, PAD);
    (row, cut)
}

const EXTRACT_BATCH: usize = 64;

/// Runs the frozen encoder in eval mode. Batches run in parallel on the
/// current rayon pool; row order follows `sentences`.
pub fn extract_cls_reps<S: AsRef<str> + Sync>(
    model: &Model<f32>,
    vocab: &Vocab,
    sentences: &[S],
    include_embeddings: bool,
) -> Result<LayerReps> {
    if sentences.is_empty() {
        return Err(ProbeError::EmptyInput("no sentences to extract".into()));
    }
    let c = model.config();
    let max_len = c.max_len;
    let wrapped: Vec<(Vec<TokenId>, bool)> =
        sentences.iter().map(|s| wrap_sentence(vocab, s.as_ref(), max_len)).collect();
    let truncated = wrapped.iter().filter(|w| w.1).count();
    let chunks: Vec<Vec<Vec<f32>>> = wrapped
        .par_chunks(EXTRACT_BATCH)
        .map(|chunk| -> Result<Vec<Vec<f32>>> {
            let rows: Vec<&[TokenId]> = chunk.iter().map(|w| w.0.as_slice()).collect();
            let batch = Batch::new(&rows)?;
            let mut tape = Tape::new();
            let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
            let enc = model.encode(&mut tape, &batch, &mut no_rng)?;
            let mut vars = Vec::new();
            if include_embeddings {
                vars.push(enc.embeddings);
            }
            vars.extend_from_slice(&enc.layers);
            let mut out = Vec::with_capacity(vars.len());
            for v in vars {
                let t = tape.value(v);
                let (l, d) = (t.shape()[1], t.shape()[2]);
                let mut m = Vec::with_capacity(chunk.len() * d);
                for b in 0..chunk.len() {
                    m.extend_from_slice(&t.data()[b * l * d..b * l * d + d]);
                }
                out.push(m);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let n_out = chunks[0].len();
    let mut matrices = vec![Vec::with_capacity(sentences.len() * c.d_hidden); n_out];
    for chunk in chunks {
        for (dst, src) in matrices.iter_mut().zip(chunk) {
            dst.extend(src);
        }
    }
    let first = if include_embeddings { 0 } else { 1 };
    Ok(LayerReps { layers: (first..=c.n_layers).collect(), matrices, n: sentences.len(), dim: c.d_hidden, truncated })
}
