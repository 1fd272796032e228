//! Binary shard files.
//!
//! ```text
//! u32 LE  manifest length
//! bytes   manifest JSON
//! repeated:
//!   u32 LE  record length (16 + 9·max_len + 1)
//!   u64 LE  doc_index
//!   u64 LE  seq_index
//!   u32 LE  input_ids[max_len]
//!   i32 LE  labels[max_len]
//!   u8      loss_mask[max_len]
//!   u8      objective code
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ObjectiveError, ObjectiveKind, RandomLabelMode, Result, TrainingExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardManifest {
    pub objective: ObjectiveKind,
    pub master_seed: u64,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub max_len: usize,
    pub record_count: u64,
    pub epochs: u64,
    pub random_labels: RandomLabelMode,
}

fn record_len(max_len: usize) -> usize {
    16 + 9 * max_len + 1
}

pub fn write_shard<W: Write>(mut w: W, manifest: &ShardManifest, examples: &[TrainingExample]) -> Result<()> {
    if examples.len() as u64 != manifest.record_count {
        return Err(ObjectiveError::BadShard(format!(
            "manifest announces {} records, got {}",
            manifest.record_count,
            examples.len()
        )));
    }
    let json = serde_json::to_vec(manifest)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let len = record_len(manifest.max_len);
    let mut buf = Vec::with_capacity(len);
    for ex in examples {
        if ex.input_ids.len() != manifest.max_len {
            return Err(ObjectiveError::BadShard(format!(
                "example length {} != max_len {}",
                ex.input_ids.len(),
                manifest.max_len
            )));
        }
        buf.clear();
        buf.extend_from_slice(&ex.doc_index.to_le_bytes());
        buf.extend_from_slice(&ex.seq_index.to_le_bytes());
        ex.input_ids.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        ex.labels.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        buf.extend_from_slice(&ex.loss_mask);
        buf.push(ex.objective.code());
        w.write_all(&(len as u32).to_le_bytes())?;
        w.write_all(&buf)?;
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(ObjectiveError::BadShard("truncated record".into()));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

pub fn read_shard<R: Read>(mut r: R) -> Result<(ShardManifest, Vec<TrainingExample>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut buf = bytes.as_slice();
    let mlen = u32::from_le_bytes(take(&mut buf, 4)?.try_into().expect("4 bytes")) as usize;
    let manifest: ShardManifest = serde_json::from_slice(take(&mut buf, mlen)?)?;
    let l = manifest.max_len;
    let mut out = Vec::with_capacity(manifest.record_count as usize);
    while !buf.is_empty() {
        let len = u32::from_le_bytes(take(&mut buf, 4)?.try_into().expect("4 bytes")) as usize;
        if len != record_len(l) {
            return Err(ObjectiveError::BadShard(format!("record length {len}, expected {}", record_len(l))));
        }
        let mut rec = take(&mut buf, len)?;
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let doc_index = u64_at(take(&mut rec, 8)?);
        let seq_index = u64_at(take(&mut rec, 8)?);
        let input_ids = take(&mut rec, 4 * l)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = take(&mut rec, 4 * l)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let loss_mask = take(&mut rec, l)?.to_vec();
        let code = take(&mut rec, 1)?[0];
        let objective = ObjectiveKind::from_code(code)
            .ok_or_else(|| ObjectiveError::BadShard(format!("unknown objective code {code}")))?;
        out.push(TrainingExample { input_ids, labels, loss_mask, objective, doc_index, seq_index });
    }
    if out.len() as u64 != manifest.record_count {
        return Err(ObjectiveError::BadShard(format!(
            "manifest announces {} records, file holds {}",
            manifest.record_count,
            out.len()
        )));
    }
    Ok((manifest, out))
}
