//! Pre-training objective generators.
//!
//! Each generator turns a [`PackedSequence`] into a [`TrainingExample`]:
//! a corrupted input, one label per position and a loss mask. Labels are
//! always computed from the original sequence.
//!
//! | objective    | supervised positions      | label space |
//! |--------------|---------------------------|-------------|
//! | `mlm`        | 15% selected              | vocabulary  |
//! | `sr`         | every non-special token   | 3           |
//! | `first-char` | 15% selected              | 29          |
//! | `ascii`      | 15% selected              | 5           |
//! | `random`     | 15% selected              | 5           |

mod labels;
mod shard;

pub use labels::{ascii_class, first_char_class, ASCII_CLASSES, FIRST_CHAR_CLASSES};
pub use shard::{read_shard, write_shard, ShardManifest};

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, tags};
use crate::tokenizer::{PackedSequence, TokenId, TokenizerError, Vocab, MASK, NUM_SPECIALS};

pub const IGNORE_LABEL: i32 = -1;
pub const MASK_RATE: f64 = 0.15;
pub const SR_RATE: f64 = 0.10;
pub const RANDOM_CLASSES: usize = 5;

pub const SR_INTACT: i32 = 0;
pub const SR_SHUFFLED: i32 = 1;
pub const SR_RANDOM: i32 = 2;
pub const SR_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("nothing to select")]
    NothingToSelect,
    #[error("sequence too short for S+R")]
    TooShortForSr,
    #[error("empty surface")]
    EmptySurface,
    #[error("rate must lie in (0, 1), got {0}")]
    BadRate(f64),
    #[error("unknown objective {0:?} (expected mlm, sr, first-char, ascii or random)")]
    UnknownObjective(String),
    #[error("malformed shard: {0}")]
    BadShard(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ObjectiveError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectiveKind {
    Mlm,
    Sr,
    FirstChar,
    Ascii,
    Random,
}

impl ObjectiveKind {
    pub const ALL: [Self; 5] = [Self::Mlm, Self::Sr, Self::FirstChar, Self::Ascii, Self::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mlm => "mlm",
            Self::Sr => "sr",
            Self::FirstChar => "first-char",
            Self::Ascii => "ascii",
            Self::Random => "random",
        }
    }

    /// Number of target categories.
    pub fn label_space(self, vocab_size: usize) -> usize {
        match self {
            Self::Mlm => vocab_size,
            Self::Sr => SR_CLASSES,
            Self::FirstChar => FIRST_CHAR_CLASSES,
            Self::Ascii => ASCII_CLASSES,
            Self::Random => RANDOM_CLASSES,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    fn corruption_tag(self) -> u64 {
        match self {
            Self::Mlm => tags::CORRUPT_MLM,
            Self::Sr => tags::CORRUPT_SR,
            Self::FirstChar => tags::CORRUPT_FIRST_CHAR,
            Self::Ascii => tags::CORRUPT_ASCII,
            Self::Random => tags::CORRUPT_RANDOM,
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "first_char" && *k == Self::FirstChar))
            .ok_or_else(|| ObjectiveError::UnknownObjective(s.to_string()))
    }
}

impl Serialize for ObjectiveKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ObjectiveKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    ToMask,
    ToRandom,
    Keep,
    Shuffle,
    Randomize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorruptionPlan {
    pub selected: Vec<usize>,
    pub actions: Vec<Action>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub input_ids: Vec<TokenId>,
    pub labels: Vec<i32>,
    pub loss_mask: Vec<u8>,
    pub objective: ObjectiveKind,
    pub doc_index: u64,
    pub seq_index: u64,
}

impl TrainingExample {
    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// How `random` labels relate to corpus positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomLabelMode {
    /// One label per (document, position), stable across epochs.
    #[default]
    Fixed,
    /// Fresh labels every epoch; a pure-noise diagnostic.
    Resampled,
}

/// Source of `random` labels.
#[derive(Clone, Copy, Debug)]
pub struct RandomLabels {
    pub master_seed: u64,
    pub mode: RandomLabelMode,
    pub epoch: u64,
}

impl RandomLabels {
    fn label(&self, doc_index: u64, doc_position: u64) -> i32 {
        let hash = match self.mode {
            RandomLabelMode::Fixed => {
                rng::derive_seed(self.master_seed, tags::RANDOM_LABEL, &[doc_index, doc_position])
            }
            RandomLabelMode::Resampled => {
                rng::derive_seed(self.master_seed, tags::RANDOM_LABEL_RESAMPLED, &[self.epoch, doc_index, doc_position])
            }
        };
        rng::bounded(hash, RANDOM_CLASSES as u64) as i32
    }
}

fn is_content(id: TokenId) -> bool {
    id as usize >= NUM_SPECIALS
}

/// Positions holding non-special tokens.
pub fn content_positions(ids: &[TokenId]) -> Vec<usize> {
    ids.iter().enumerate().filter(|(_, &id)| is_content(id)).map(|(i, _)| i).collect()
}

/// `max(1, round(rate · n))`
pub fn selection_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64).round() as usize).max(1)
}

/// Uniformly samples `max(1, round(rate·n))` distinct non-special positions,
/// returned in ascending order.
pub fn select_positions<R: Rng + ?Sized>(seq: &PackedSequence, rate: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(ObjectiveError::BadRate(rate));
    }
    let candidates = content_positions(&seq.ids);
    if candidates.is_empty() {
        return Err(ObjectiveError::NothingToSelect);
    }
    let k = selection_count(rate, candidates.len()).min(candidates.len());
    let mut picked: Vec<usize> = sample(rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

fn random_content_token<R: Rng + ?Sized>(vocab_size: usize, rng: &mut R) -> TokenId {
    rng.gen_range(NUM_SPECIALS..vocab_size.max(NUM_SPECIALS + 1)) as TokenId
}

/// 80% `[MASK]`, 10% random non-special token, 10% unchanged, drawn
/// independently per selected position.
pub fn corrupt_mlm_style<R: Rng + ?Sized>(
    ids: &[TokenId],
    positions: &[usize],
    vocab_size: usize,
    rng: &mut R,
) -> (Vec<TokenId>, CorruptionPlan) {
    let mut out = ids.to_vec();
    let mut plan = CorruptionPlan::default();
    for &pos in positions {
        let u: f64 = rng.gen();
        let action = if u < 0.8 {
            out[pos] = MASK;
            Action::ToMask
        } else if u < 0.9 {
            out[pos] = random_content_token(vocab_size, rng);
            Action::ToRandom
        } else {
            Action::Keep
        };
        plan.selected.push(pos);
        plan.actions.push(action);
    }
    (out, plan)
}

fn masked_example<R, F>(
    seq: &PackedSequence,
    vocab: &Vocab,
    rng: &mut R,
    kind: ObjectiveKind,
    label: F,
) -> Result<TrainingExample>
where
    R: Rng + ?Sized,
    F: Fn(usize, TokenId) -> Result<i32>,
{
    let positions = select_positions(seq, MASK_RATE, rng)?;
    let (input_ids, _plan) = corrupt_mlm_style(&seq.ids, &positions, vocab.len(), rng);
    let len = seq.ids.len();
    let mut labels = vec![IGNORE_LABEL; len];
    let mut loss_mask = vec![0u8; len];
    for &pos in &positions {
        labels[pos] = label(pos, seq.ids[pos])?;
        loss_mask[pos] = 1;
    }
    Ok(TrainingExample {
        input_ids,
        labels,
        loss_mask,
        objective: kind,
        doc_index: seq.doc_index,
        seq_index: seq.seq_index,
    })
}

/// Masked language modelling: predict the original token at 15% of positions.
pub fn make_mlm<R: Rng + ?Sized>(seq: &PackedSequence, vocab: &Vocab, rng: &mut R) -> Result<TrainingExample> {
    masked_example(seq, vocab, rng, ObjectiveKind::Mlm, |_, id| Ok(id as i32))
}

/// Masked first-character prediction (29 classes).
pub fn make_first_char<R: Rng + ?Sized>(seq: &PackedSequence, vocab: &Vocab, rng: &mut R) -> Result<TrainingExample> {
    masked_example(seq, vocab, rng, ObjectiveKind::FirstChar, |_, id| {
        Ok(first_char_class(vocab.token_surface(id)?)? as i32)
    })
}

/// Masked character-code sum modulo 5.
pub fn make_ascii<R: Rng + ?Sized>(seq: &PackedSequence, vocab: &Vocab, rng: &mut R) -> Result<TrainingExample> {
    masked_example(seq, vocab, rng, ObjectiveKind::Ascii, |_, id| Ok(ascii_class(vocab.token_surface(id)?)? as i32))
}

/// Masked positions with arbitrary 5-way labels keyed on the corpus position.
pub fn make_random<R: Rng + ?Sized>(
    seq: &PackedSequence,
    vocab: &Vocab,
    rng: &mut R,
    labels: &RandomLabels,
) -> Result<TrainingExample> {
    masked_example(seq, vocab, rng, ObjectiveKind::Random, |pos, _| {
        Ok(labels.label(seq.doc_index, seq.doc_position(pos)))
    })
}

/// Shuffle + random replacement detection.
///
/// Two disjoint sets of `max(1, round(0.1·n))` positions: the first has its
/// tokens permuted by a cyclic derangement (a singleton set swaps with one
/// extra intact position instead), the second is replaced by random tokens.
/// Every non-special position is labelled INTACT, SHUFFLED or RANDOM.
pub fn make_sr<R: Rng + ?Sized>(seq: &PackedSequence, vocab: &Vocab, rng: &mut R) -> Result<TrainingExample> {
    let (input_ids, plan) = corrupt_sr(&seq.ids, vocab.len(), rng)?;
    let len = seq.ids.len();
    let mut labels = vec![IGNORE_LABEL; len];
    let mut loss_mask = vec![0u8; len];
    for pos in content_positions(&seq.ids) {
        labels[pos] = SR_INTACT;
        loss_mask[pos] = 1;
    }
    for (&pos, action) in plan.selected.iter().zip(&plan.actions) {
        labels[pos] = match action {
            Action::Shuffle => SR_SHUFFLED,
            _ => SR_RANDOM,
        };
    }
    Ok(TrainingExample {
        input_ids,
        labels,
        loss_mask,
        objective: ObjectiveKind::Sr,
        doc_index: seq.doc_index,
        seq_index: seq.seq_index,
    })
}

pub fn corrupt_sr<R: Rng + ?Sized>(
    ids: &[TokenId],
    vocab_size: usize,
    rng: &mut R,
) -> Result<(Vec<TokenId>, CorruptionPlan)> {
    let candidates = content_positions(ids);
    let n = candidates.len();
    if n < 4 {
        return Err(ObjectiveError::TooShortForSr);
    }
    let k = selection_count(SR_RATE, n);
    let drawn: Vec<usize> = sample(rng, n, 2 * k).into_iter().map(|i| candidates[i]).collect();
    let mut shuffle_set = drawn[..k].to_vec();
    let mut random_set = drawn[k..].to_vec();
    shuffle_set.sort_unstable();
    random_set.sort_unstable();

    if k == 1 {
        let free: Vec<usize> = candidates.iter().copied().filter(|p| !drawn.contains(p)).collect();
        let partner = free[rng.gen_range(0..free.len())];
        shuffle_set.push(partner);
        shuffle_set.sort_unstable();
    }

    let mut out = ids.to_vec();
    // Sattolo: a uniformly random cyclic permutation, never a fixed point.
    let m = shuffle_set.len();
    let mut perm: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        let j = rng.gen_range(0..i);
        perm.swap(i, j);
    }
    for (i, &pos) in shuffle_set.iter().enumerate() {
        out[pos] = ids[shuffle_set[perm[i]]];
    }
    for &pos in &random_set {
        out[pos] = random_content_token(vocab_size, rng);
    }

    let mut plan = CorruptionPlan::default();
    for &pos in &shuffle_set {
        plan.selected.push(pos);
        plan.actions.push(Action::Shuffle);
    }
    for &pos in &random_set {
        plan.selected.push(pos);
        plan.actions.push(Action::Randomize);
    }
    Ok((out, plan))
}

/// Produces examples for one objective with seeds derived from
/// `(master_seed, epoch, doc_index, seq_index)`, so any subset can be
/// generated in any order with identical results.
#[derive(Clone, Copy, Debug)]
pub struct ExampleGenerator<'a> {
    pub vocab: &'a Vocab,
    pub kind: ObjectiveKind,
    pub master_seed: u64,
    pub random_labels: RandomLabelMode,
}

impl<'a> ExampleGenerator<'a> {
    pub fn new(vocab: &'a Vocab, kind: ObjectiveKind, master_seed: u64) -> Self {
        Self { vocab, kind, master_seed, random_labels: RandomLabelMode::Fixed }
    }

    pub fn generate(&self, seq: &PackedSequence, epoch: u64) -> Result<TrainingExample> {
        let mut rng = rng::stream(self.master_seed, self.kind.corruption_tag(), &[epoch, seq.doc_index, seq.seq_index]);
        match self.kind {
            ObjectiveKind::Mlm => make_mlm(seq, self.vocab, &mut rng),
            ObjectiveKind::Sr => make_sr(seq, self.vocab, &mut rng),
            ObjectiveKind::FirstChar => make_first_char(seq, self.vocab, &mut rng),
            ObjectiveKind::Ascii => make_ascii(seq, self.vocab, &mut rng),
            ObjectiveKind::Random => {
                let labels = RandomLabels { master_seed: self.master_seed, mode: self.random_labels, epoch };
                make_random(seq, self.vocab, &mut rng, &labels)
            }
        }
    }

    /// Generates one epoch in parallel, preserving input order. Sequences
    /// the objective cannot use (too short) are skipped; the count of
    /// skipped sequences is returned alongside.
    pub fn generate_epoch(&self, seqs: &[PackedSequence], epoch: u64) -> Result<(Vec<TrainingExample>, usize)> {
        let results: Vec<Result<TrainingExample>> = seqs.par_iter().map(|s| self.generate(s, epoch)).collect();
        let mut out = Vec::with_capacity(results.len());
        let mut skipped = 0;
        for r in results {
            match r {
                Ok(e) => out.push(e),
                Err(ObjectiveError::NothingToSelect | ObjectiveError::TooShortForSr) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((out, skipped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{train_bpe, BpeOptions, CLS, PAD, SEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        let text = "the cat sat on a mat with 42 dogs , and the émigré ran !";
        train_bpe(text, 200, &BpeOptions::default()).unwrap()
    }

    /// A sequence with `n` content tokens cycling through the vocabulary.
    fn seq_with(v: &Vocab, n: usize) -> PackedSequence {
        let mut ids = vec![CLS];
        ids.extend((0..n).map(|i| (NUM_SPECIALS + i % (v.len() - NUM_SPECIALS)) as TokenId));
        ids.push(SEP);
        ids.resize(n + 6, PAD);
        PackedSequence { ids, doc_index: 3, seq_index: 0 }
    }

    #[test]
    fn selection_counts() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_positions(&seq_with(&v, 100), 0.15, &mut rng).unwrap().len(), 15);
        assert_eq!(select_positions(&seq_with(&v, 3), 0.10, &mut rng).unwrap().len(), 1);
        let empty = PackedSequence { ids: vec![CLS, SEP, PAD, PAD], doc_index: 0, seq_index: 0 };
        assert!(matches!(select_positions(&empty, 0.15, &mut rng), Err(ObjectiveError::NothingToSelect)));
        assert!(matches!(select_positions(&seq_with(&v, 10), 1.0, &mut rng), Err(ObjectiveError::BadRate(_))));
    }

    #[test]
    fn empty_plan_is_identity() {
        let v = vocab();
        let s = seq_with(&v, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ids, plan) = corrupt_mlm_style(&s.ids, &[], v.len(), &mut rng);
        assert_eq!(ids, s.ids);
        assert!(plan.selected.is_empty());
    }

    #[test]
    fn mlm_labels_and_mask() {
        let v = vocab();
        let s = seq_with(&v, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = make_mlm(&s, &v, &mut rng).unwrap();
        assert_eq!(ex.supervised(), 15);
        for i in 0..s.ids.len() {
            if ex.loss_mask[i] == 1 {
                assert_eq!(ex.labels[i], s.ids[i] as i32);
            } else {
                assert_eq!(ex.labels[i], IGNORE_LABEL);
                assert_eq!(ex.input_ids[i], s.ids[i]);
            }
        }
    }

    #[test]
    fn sr_structure() {
        let v = vocab();
        let s = seq_with(&v, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = make_sr(&s, &v, &mut rng).unwrap();
        let count = |l: i32| ex.labels.iter().filter(|&&x| x == l).count();
        assert_eq!((count(SR_SHUFFLED), count(SR_RANDOM), count(SR_INTACT)), (10, 10, 80));
        assert_eq!(ex.supervised(), 100);
        assert!(matches!(make_sr(&seq_with(&v, 3), &v, &mut rng), Err(ObjectiveError::TooShortForSr)));
    }

    #[test]
    fn sr_singleton_swaps_with_partner() {
        let v = vocab();
        let s = seq_with(&v, 6);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = make_sr(&s, &v, &mut rng).unwrap();
            let shuffled: Vec<usize> = (0..s.ids.len()).filter(|&i| ex.labels[i] == SR_SHUFFLED).collect();
            assert_eq!(shuffled.len(), 2);
            assert_eq!(ex.input_ids[shuffled[0]], s.ids[shuffled[1]]);
            assert_eq!(ex.input_ids[shuffled[1]], s.ids[shuffled[0]]);
        }
    }

    #[test]
    fn first_char_and_ascii_labels_follow_original_token() {
        let v = vocab();
        let cat = v.id("cat").expect("cat is a token");
        let mut ids = vec![CLS];
        ids.extend(std::iter::repeat_n(cat, 20));
        ids.push(SEP);
        let s = PackedSequence { ids, doc_index: 0, seq_index: 0 };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fc = make_first_char(&s, &v, &mut rng).unwrap();
            let asc = make_ascii(&s, &v, &mut rng).unwrap();
            for i in 0..s.ids.len() {
                if fc.loss_mask[i] == 1 {
                    assert_eq!(fc.labels[i], 2);
                }
                if asc.loss_mask[i] == 1 {
                    assert_eq!(asc.labels[i], 2);
                }
            }
        }
    }

    #[test]
    fn random_labels_ignore_token_identity() {
        let v = vocab();
        let a = seq_with(&v, 40);
        let mut b = a.clone();
        // same corpus positions, different tokens
        for id in b.ids.iter_mut().filter(|id| **id as usize >= NUM_SPECIALS) {
            *id = NUM_SPECIALS as TokenId;
        }
        let labels = RandomLabels { master_seed: 9, mode: RandomLabelMode::Fixed, epoch: 0 };
        let ea = make_random(&a, &v, &mut ChaCha8Rng::seed_from_u64(5), &labels).unwrap();
        let eb = make_random(&b, &v, &mut ChaCha8Rng::seed_from_u64(5), &labels).unwrap();
        assert_eq!(ea.labels, eb.labels);
        assert!(ea.labels.iter().all(|&l| l == IGNORE_LABEL || (0..5).contains(&l)));
    }

    #[test]
    fn generator_is_order_free() {
        let v = vocab();
        let seqs: Vec<PackedSequence> = (0..8).map(|d| PackedSequence { doc_index: d, ..seq_with(&v, 30) }).collect();
        for kind in ObjectiveKind::ALL {
            let g = ExampleGenerator::new(&v, kind, 77);
            let (all, skipped) = g.generate_epoch(&seqs, 0).unwrap();
            assert_eq!(skipped, 0);
            let last = g.generate(&seqs[7], 0).unwrap();
            assert_eq!(all[7], last);
            assert_ne!(g.generate(&seqs[7], 1).unwrap().input_ids, last.input_ids);
        }
    }

    #[test]
    fn objective_names_roundtrip() {
        for k in ObjectiveKind::ALL {
            assert_eq!(k.name().parse::<ObjectiveKind>().unwrap(), k);
            assert_eq!(ObjectiveKind::from_code(k.code()), Some(k));
        }
        assert!("nsp".parse::<ObjectiveKind>().is_err());
        assert_eq!(ObjectiveKind::Mlm.label_space(8192), 8192);
        assert_eq!(ObjectiveKind::FirstChar.label_space(8192), 29);
    }
}
