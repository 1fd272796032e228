//! A small probabilistic grammar that produces English-like documents with
//! rigid word order, for desk-scale pre-training and probing.

use rand::Rng;

use crate::rng::{self, tags};

const DETERMINERS: &[&str] = &["the", "a", "every", "some", "this", "that", "no", "my", "your", "our"];
const ADJECTIVES: &[&str] = &[
    "big", "small", "old", "young", "red", "green", "quiet", "loud", "happy", "sad", "bright", "dark", "tall", "short",
    "clever", "lazy", "brave", "shy", "warm", "cold", "heavy", "gentle", "strange", "famous",
];
const NOUNS: &[&str] = &[
    "dog", "cat", "bird", "farmer", "teacher", "child", "king", "queen", "horse", "river", "garden", "house", "window",
    "table", "letter", "song", "city", "forest", "doctor", "sailor", "painter", "baker", "student", "village",
    "mountain", "bridge", "lamp", "book", "boat", "road", "tree", "stone", "wolf", "fox", "owl", "engine", "market",
    "soldier", "poet", "island",
];
const TRANSITIVE: &[&str] = &[
    "saw", "found", "liked", "chased", "painted", "visited", "followed", "carried", "watched", "built", "called",
    "helped", "pushed", "opened", "wrote", "heard", "sold", "bought", "moved", "cleaned",
];
const INTRANSITIVE: &[&str] = &[
    "slept", "laughed", "waited", "arrived", "smiled", "sang", "danced", "left", "rested", "shouted", "stayed", "cried",
];
const ADVERBS: &[&str] =
    &["quickly", "slowly", "often", "rarely", "loudly", "softly", "again", "today", "yesterday", "early", "late"];
const PREPOSITIONS: &[&str] = &["near", "behind", "under", "beside", "across", "inside", "above", "without"];
const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because"];

/// Shape of generated text.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrammarConfig {
    pub sentences_per_doc: (usize, usize),
    /// Probability of each optional adjective slot.
    pub p_adjective: f64,
    pub p_pp: f64,
    pub p_adverb: f64,
    pub p_compound: f64,
    /// Word choice within a lexicon follows `1 / rank^zipf`; 0 is uniform.
    pub zipf: f64,
    /// Chance that an open-class slot in a document draws from that
    /// document's topic words instead of the whole lexicon.
    pub p_topic: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            sentences_per_doc: (4, 8),
            p_adjective: 0.35,
            p_pp: 0.3,
            p_adverb: 0.3,
            p_compound: 0.15,
            zipf: 1.6,
            p_topic: 0.8,
        }
    }
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, cfg: &GrammarConfig, words: &[&'a str]) -> &'a str {
    let weight = |rank: usize| (rank as f64 + 1.0).powf(-cfg.zipf);
    let total: f64 = (0..words.len()).map(weight).sum();
    let mut u = rng.gen::<f64>() * total;
    for (rank, w) in words.iter().enumerate() {
        u -= weight(rank);
        if u < 0.0 {
            return w;
        }
    }
    words.last().expect("non-empty lexicon")
}

/// Open-class words a document keeps returning to.
struct Topic {
    adjectives: Vec<&'static str>,
    nouns: Vec<&'static str>,
    transitive: Vec<&'static str>,
    intransitive: Vec<&'static str>,
}

impl Topic {
    fn draw<R: Rng + ?Sized>(rng: &mut R, cfg: &GrammarConfig) -> Self {
        let mut subset = |words: &[&'static str], k: usize| {
            let mut out: Vec<&'static str> = Vec::with_capacity(k);
            while out.len() < k.min(words.len()) {
                let w = pick(rng, cfg, words);
                if !out.contains(&w) {
                    out.push(w);
                }
            }
            out
        };
        Self {
            adjectives: subset(ADJECTIVES, 4),
            nouns: subset(NOUNS, 6),
            transitive: subset(TRANSITIVE, 4),
            intransitive: subset(INTRANSITIVE, 3),
        }
    }
}

struct Gen<'c, 't> {
    cfg: &'c GrammarConfig,
    topic: Option<&'t Topic>,
}

impl Gen<'_, '_> {
    fn open<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        full: &[&'static str],
        own: impl Fn(&Topic) -> &[&'static str],
    ) -> &'static str {
        match self.topic {
            Some(t) if rng.gen_bool(self.cfg.p_topic) => pick(rng, self.cfg, own(t)),
            _ => pick(rng, self.cfg, full),
        }
    }

    fn noun_phrase<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<&'static str>, depth: usize) {
        out.push(pick(rng, self.cfg, DETERMINERS));
        for _ in 0..2 {
            if rng.gen_bool(self.cfg.p_adjective) {
                out.push(self.open(rng, ADJECTIVES, |t| &t.adjectives));
            }
        }
        out.push(self.open(rng, NOUNS, |t| &t.nouns));
        if depth == 0 && rng.gen_bool(self.cfg.p_pp) {
            out.push(pick(rng, self.cfg, PREPOSITIONS));
            self.noun_phrase(rng, out, depth + 1);
        }
    }

    fn clause<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<&'static str>) {
        self.noun_phrase(rng, out, 0);
        if rng.gen_bool(0.65) {
            out.push(self.open(rng, TRANSITIVE, |t| &t.transitive));
            self.noun_phrase(rng, out, 0);
        } else {
            out.push(self.open(rng, INTRANSITIVE, |t| &t.intransitive));
        }
        if rng.gen_bool(self.cfg.p_adverb) {
            out.push(pick(rng, self.cfg, ADVERBS));
        }
    }

    fn sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<&'static str> {
        let mut out = Vec::with_capacity(16);
        self.clause(rng, &mut out);
        if rng.gen_bool(self.cfg.p_compound) {
            out.push(pick(rng, self.cfg, CONJUNCTIONS));
            self.clause(rng, &mut out);
        }
        out.push(".");
        out
    }
}

/// One topic-free sentence as a list of words, final period included.
pub fn sentence<R: Rng + ?Sized>(rng: &mut R, cfg: &GrammarConfig) -> Vec<&'static str> {
    Gen { cfg, topic: None }.sentence(rng)
}

/// `n_docs` documents, one sentence per line, separated by blank lines.
pub fn corpus(n_docs: usize, seed: u64, cfg: &GrammarConfig) -> String {
    let mut text = String::new();
    for d in 0..n_docs {
        let mut rng = rng::stream(seed, tags::SYNTH, &[0, d as u64]);
        let (lo, hi) = cfg.sentences_per_doc;
        let n = rng.gen_range(lo..=hi.max(lo));
        if d > 0 {
            text.push('\n');
        }
        let topic = Topic::draw(&mut rng, cfg);
        let gen = Gen { cfg, topic: Some(&topic) };
        for _ in 0..n {
            text.push_str(&gen.sentence(&mut rng).join(" "));
            text.push('\n');
        }
    }
    text
}

/// `n` standalone, topic-free sentences from a stream independent of
/// [`corpus`].
pub fn sentences(n: usize, seed: u64, cfg: &GrammarConfig) -> Vec<String> {
    let mut rng = rng::stream(seed, tags::SYNTH, &[1]);
    (0..n).map(|_| sentence(&mut rng, cfg).join(" ")).collect()
}
