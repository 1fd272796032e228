use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ProbeError, Result};
use crate::rng::{self, tags};
use crate::tokenizer::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Train => "TR",
            Self::Validation => "VA",
            Self::Test => "TE",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "tr" => Ok(Self::Train),
            "va" => Ok(Self::Validation),
            "te" => Ok(Self::Test),
            other => Err(format!("unknown split {other:?} (expected tr, va or te)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeExample {
    pub split: Split,
    pub label: String,
    pub sentence: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTaskDataset {
    pub name: String,
    pub examples: Vec<ProbeExample>,
    /// Label vocabulary; numeric labels sort numerically, others lexically.
    pub labels: Vec<String>,
}

fn label_vocabulary<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut set: Vec<String> = labels.collect::<HashSet<_>>().into_iter().map(str::to_string).collect();
    if set.iter().all(|l| l.parse::<i64>().is_ok()) {
        set.sort_by_key(|l| l.parse::<i64>().expect("numeric"));
    } else {
        set.sort();
    }
    set
}

impl ProbeTaskDataset {
    /// Builds a dataset, checking that every split is present.
    pub fn new(name: impl Into<String>, examples: Vec<ProbeExample>) -> Result<Self> {
        for s in Split::ALL {
            if !examples.iter().any(|e| e.split == s) {
                return Err(ProbeError::MissingSplit(s));
            }
        }
        let labels = label_vocabulary(examples.iter().map(|e| e.label.as_str()));
        Ok(Self { name: name.into(), examples, labels })
    }

    pub fn label_index(&self, label: &str) -> usize {
        self.labels.iter().position(|l| l == label).expect("label in vocabulary")
    }

    /// Sentences and label indices of one split, in file order.
    pub fn split(&self, split: Split) -> (Vec<&str>, Vec<usize>) {
        self.examples
            .iter()
            .filter(|e| e.split == split)
            .map(|e| (e.sentence.as_str(), self.label_index(&e.label)))
            .unzip()
    }

    pub fn count(&self, split: Split) -> usize {
        self.examples.iter().filter(|e| e.split == split).count()
    }

    pub fn to_tsv(&self) -> String {
        self.examples.iter().map(|e| format!("{}\t{}\t{}\n", e.split, e.label, e.sentence)).collect()
    }
}

/// Parses `split \t label \t sentence` lines. Blank lines are skipped.
pub fn parse_task_tsv(name: &str, text: &str) -> Result<ProbeTaskDataset> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let (Some(split), Some(label), Some(sentence)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(ProbeError::Malformed { line: line_no, reason: "expected three tab-separated fields".into() });
        };
        let split = split.trim().parse::<Split>().map_err(|reason| ProbeError::Malformed { line: line_no, reason })?;
        let label = label.trim();
        if label.is_empty() {
            return Err(ProbeError::Malformed { line: line_no, reason: "empty label".into() });
        }
        examples.push(ProbeExample {
            split,
            label: label.to_string(),
            sentence: sentence.trim_end_matches('\r').to_string(),
        });
    }
    ProbeTaskDataset::new(name, examples)
}

pub fn load_task_tsv(path: &Path) -> Result<ProbeTaskDataset> {
    let text = std::fs::read_to_string(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("task").to_string();
    parse_task_tsv(&name, &text)
}

/// Word-count bins of the synthetic SentLen task.
pub const DEFAULT_SENTLEN_BINS: [(usize, usize); 6] = [(3, 6), (7, 10), (11, 14), (15, 18), (19, 22), (23, 26)];

/// Random-word sentences whose label is the bin of their word count.
/// Sentences are unique across all splits.
pub fn gen_synthetic_sentlen(
    vocab: &Vocab,
    n_per_split: [usize; 3],
    bins: &[(usize, usize)],
    seed: u64,
) -> Result<ProbeTaskDataset> {
    if bins.is_empty() || bins.iter().any(|&(lo, hi)| lo == 0 || lo > hi) {
        return Err(ProbeError::EmptyInput("sentence length bins".into()));
    }
    let words: Vec<&str> = vocab.word_ids().into_iter().map(|id| vocab.raw(id).expect("word id in range")).collect();
    if words.is_empty() {
        return Err(ProbeError::EmptyInput("vocabulary has no word tokens".into()));
    }
    let mut seen = HashSet::new();
    let mut examples = Vec::new();
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let mut rng = rng::stream(seed, tags::SYNTH, &[2, k as u64]);
        let mut made = 0;
        while made < n_per_split[k] {
            let bin = rng.gen_range(0..bins.len());
            let (lo, hi) = bins[bin];
            let len = rng.gen_range(lo..=hi);
            let sentence = (0..len).map(|_| *words.choose(&mut rng).expect("non-empty")).collect::<Vec<_>>().join(" ");
            if seen.insert(sentence.clone()) {
                examples.push(ProbeExample { split, label: bin.to_string(), sentence });
                made += 1;
            }
        }
    }
    ProbeTaskDataset::new("synthetic:sentlen", examples)
}

/// Bigram-shift task: half the sentences get one adjacent word pair swapped
/// (label `I`), the rest are copied verbatim (label `O`). Source sentences
/// are partitioned across splits, so no source feeds two splits.
pub fn gen_synthetic_bshift<S: AsRef<str>>(
    sentences: &[S],
    n_per_split: [usize; 3],
    seed: u64,
) -> Result<ProbeTaskDataset> {
    let mut pool: Vec<Vec<&str>> = sentences
        .iter()
        .map(|s| s.as_ref().split_whitespace().collect::<Vec<_>>())
        .filter(|w| w.len() >= 4 && w.windows(2).any(|p| p[0] != p[1]))
        .collect();
    if pool.is_empty() {
        return Err(ProbeError::TooShortCorpus);
    }
    pool.shuffle(&mut rng::stream(seed, tags::SYNTH, &[3]));
    let total: usize = n_per_split.iter().sum();
    let mut start = 0;
    let mut examples = Vec::with_capacity(total);
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let share = if k == 2 { pool.len() - start } else { (pool.len() * n_per_split[k]).div_ceil(total.max(1)) };
        let part = &pool[start..(start + share).min(pool.len())];
        start = (start + share).min(pool.len());
        if part.is_empty() && n_per_split[k] > 0 {
            return Err(ProbeError::TooShortCorpus);
        }
        let mut rng = rng::stream(seed, tags::SYNTH, &[4, k as u64]);
        for i in 0..n_per_split[k] {
            let src = &part[i % part.len()];
            let (label, words) = if rng.gen_bool(0.5) {
                let mut w = src.clone();
                let pos = loop {
                    let p = rng.gen_range(0..w.len() - 1);
                    if w[p] != w[p + 1] {
                        break p;
                    }
                };
                w.swap(pos, pos + 1);
                ("I", w)
            } else {
                ("O", src.clone())
            };
            examples.push(ProbeExample { split, label: label.into(), sentence: words.join(" ") });
        }
    }
    ProbeTaskDataset::new("synthetic:bshift", examples)
}
