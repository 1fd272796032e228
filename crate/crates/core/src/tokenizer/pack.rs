use super::{Result, TokenId, TokenizerError, Vocab, CLS, PAD, SEP};

/// A model-ready sequence: `CLS ids.. SEP PAD..`, exactly `max_len` long.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedSequence {
    pub ids: Vec<TokenId>,
    pub doc_index: u64,
    /// Ordinal of this chunk within its document.
    pub seq_index: u64,
}

impl PackedSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Content tokens per chunk.
    pub fn chunk_len(&self) -> usize {
        self.ids.len() - 2
    }

    /// Position of slot `pos` counted from the start of the document.
    pub fn doc_position(&self, pos: usize) -> u64 {
        self.seq_index * self.chunk_len() as u64 + pos as u64 - 1
    }

    /// Index of the SEP token.
    pub fn sep_index(&self) -> usize {
        self.ids.iter().rposition(|&i| i == SEP).unwrap_or(0)
    }
}

/// Splits plain text into documents at blank lines.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        docs.push(current.join("\n"));
    }
    docs
}

/// Encodes each document and cuts it into `max_len − 2` token chunks,
/// wrapped as `CLS … SEP` and PAD-suffixed. Chunks never span documents.
pub fn pack_documents<S: AsRef<str>>(vocab: &Vocab, docs: &[S], max_len: usize) -> Result<Vec<PackedSequence>> {
    if max_len < 8 {
        return Err(TokenizerError::MaxLenTooSmall(max_len));
    }
    let chunk = max_len - 2;
    let mut out = Vec::new();
    for (doc_index, doc) in docs.iter().enumerate() {
        let ids = vocab.encode(doc.as_ref());
        for (seq_index, piece) in ids.chunks(chunk).enumerate() {
            let mut seq = Vec::with_capacity(max_len);
            seq.push(CLS);
            seq.extend_from_slice(piece);
            seq.push(SEP);
            seq.resize(max_len, PAD);
            out.push(PackedSequence { ids: seq, doc_index: doc_index as u64, seq_index: seq_index as u64 });
        }
    }
    Ok(out)
}

pub fn pack_corpus(vocab: &Vocab, corpus: &str, max_len: usize) -> Result<Vec<PackedSequence>> {
    pack_documents(vocab, &split_documents(corpus), max_len)
}
