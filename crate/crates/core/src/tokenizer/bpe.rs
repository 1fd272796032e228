use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};

use super::{
    is_isolated, pretokenize, Result, TokenizerError, Vocab, DEFAULT_CONTINUATION_MARKER, NUM_SPECIALS,
    SPECIAL_SURFACES,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeOptions {
    pub continuation_marker: String,
    pub lowercase: bool,
}

impl Default for BpeOptions {
    fn default() -> Self {
        Self { continuation_marker: DEFAULT_CONTINUATION_MARKER.to_string(), lowercase: true }
    }
}

pub(crate) fn merged_surface(left: &str, right: &str, marker: &str) -> String {
    let mut s = left.to_string();
    s.push_str(right.strip_prefix(marker).unwrap_or(right));
    s
}

/// Heap entry: highest count first, then the lexicographically smallest
/// (left, right) pair.
#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| (&other.left, &other.right).cmp(&(&self.left, &self.right)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Word {
    symbols: Vec<u32>,
    count: u64,
}

/// Learns a BPE vocabulary of `vocab_size` entries from `corpus`.
///
/// The initial alphabet holds every character seen, in word-initial form and
/// (for characters that can occur inside a word) in continuation form, so
/// any text over the training characters encodes without [`super::UNK`].
/// Merges are learned until the vocabulary is full or no pair remains.
pub fn train_bpe(corpus: &str, vocab_size: usize, opts: &BpeOptions) -> Result<Vocab> {
    let marker = opts.continuation_marker.as_str();
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for w in pretokenize(corpus, opts.lowercase) {
        *word_counts.entry(w).or_default() += 1;
    }
    if word_counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut alphabet = BTreeSet::new();
    for w in word_counts.keys() {
        for c in w.chars() {
            alphabet.insert(c.to_string());
            if !is_isolated(c) {
                alphabet.insert(format!("{marker}{c}"));
            }
        }
    }
    let minimum = NUM_SPECIALS + alphabet.len();
    if vocab_size < minimum {
        return Err(TokenizerError::VocabTooSmall { requested: vocab_size, minimum });
    }

    let mut tokens: Vec<String> = SPECIAL_SURFACES.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    let mut ids: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();

    let mut words: Vec<Word> = word_counts
        .iter()
        .map(|(w, &count)| Word {
            symbols: w
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    let s = if i == 0 { c.to_string() } else { format!("{marker}{c}") };
                    ids[&s]
                })
                .collect(),
            count,
        })
        .collect();

    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut locations: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.symbols.windows(2) {
            let pair = (p[0], p[1]);
            *counts.entry(pair).or_default() += w.count;
            locations.entry(pair).or_default().insert(wi);
        }
    }
    let candidate = |pair: (u32, u32), count: u64, tokens: &[String]| Candidate {
        count,
        left: tokens[pair.0 as usize].clone(),
        right: tokens[pair.1 as usize].clone(),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> =
        counts.iter().map(|(&pair, &count)| candidate(pair, count, &tokens)).collect();

    let mut merges = Vec::new();
    while tokens.len() < vocab_size {
        let Some(best) = heap.pop() else { break };
        if counts.get(&best.pair).copied().unwrap_or(0) != best.count || best.count == 0 {
            continue;
        }
        let surface = merged_surface(&best.left, &best.right, marker);
        let new_id = match ids.get(&surface) {
            Some(&id) => id,
            None => {
                tokens.push(surface.clone());
                ids.insert(surface, (tokens.len() - 1) as u32);
                (tokens.len() - 1) as u32
            }
        };
        merges.push((best.left.clone(), best.right.clone()));

        let mut affected: Vec<usize> =
            locations.get(&best.pair).map(|s| s.iter().copied().collect()).unwrap_or_default();
        affected.sort_unstable();
        let mut changed = BTreeSet::new();
        for wi in affected {
            let w = &mut words[wi];
            if !w.symbols.windows(2).any(|p| (p[0], p[1]) == best.pair) {
                continue;
            }
            for p in w.symbols.windows(2) {
                let pair = (p[0], p[1]);
                *counts.get_mut(&pair).expect("counted") -= w.count;
                changed.insert(pair);
            }
            let mut next = Vec::with_capacity(w.symbols.len());
            let mut i = 0;
            while i < w.symbols.len() {
                if i + 1 < w.symbols.len() && (w.symbols[i], w.symbols[i + 1]) == best.pair {
                    next.push(new_id);
                    i += 2;
                } else {
                    next.push(w.symbols[i]);
                    i += 1;
                }
            }
            w.symbols = next;
            for p in w.symbols.windows(2) {
                let pair = (p[0], p[1]);
                *counts.entry(pair).or_default() += w.count;
                locations.entry(pair).or_default().insert(wi);
                changed.insert(pair);
            }
        }
        for pair in changed {
            let count = counts[&pair];
            if count > 0 {
                heap.push(candidate(pair, count, &tokens));
            }
        }
    }

    Vocab::from_parts(merges, tokens, opts.continuation_marker.clone(), opts.lowercase)
}
