//! BERT-style encoder with objective heads and per-layer `[CLS]` export.

mod checkpoint;
mod encoder;
mod heads;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use encoder::{Batch, EncoderVars, ForwardOutput};
pub use heads::Targets;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::objectives::ObjectiveKind;
use crate::rng::{self, tags};
use crate::tensor::{ParamId, ParamStore, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("head mismatch: {0}")]
    HeadMismatch(String),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("config hash mismatch: manifest says {expected}, config hashes to {actual}")]
    ConfigHashMismatch { expected: String, actual: String },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Base,
    Medium,
    Small,
    Tiny,
}

impl Preset {
    /// (layers, heads, hidden, feed-forward)
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            Self::Base => (12, 12, 768, 3072),
            Self::Medium => (8, 8, 512, 2048),
            Self::Small => (4, 8, 512, 2048),
            Self::Tiny => (2, 4, 64, 256),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Medium => "medium",
            Self::Small => "small",
            Self::Tiny => "tiny",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Base, Self::Medium, Self::Small, Self::Tiny]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown preset {s:?}")))
    }
}

/// Output head attached to the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HeadSpec {
    None,
    /// Projection onto the vocabulary.
    Mlm,
    /// Per-position classifier.
    Token {
        classes: usize,
    },
    /// Tanh pooler over the final `[CLS]` state, then a classifier.
    /// `classes == 1` is a regression head trained with squared error.
    Sequence {
        classes: usize,
    },
}

impl HeadSpec {
    pub fn for_objective(kind: ObjectiveKind, vocab_size: usize) -> Self {
        match kind {
            ObjectiveKind::Mlm => Self::Mlm,
            other => Self::Token { classes: other.label_space(vocab_size) },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub type_vocab_size: usize,
    pub dropout_p: f64,
    pub attention_dropout_p: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    pub tied_embeddings: bool,
    /// Export the embedding output as layer 0 of `cls_by_layer`.
    pub include_embedding_layer: bool,
    pub head: HeadSpec,
}

impl ModelConfig {
    pub fn from_preset(preset: Preset, vocab_size: usize, max_len: usize) -> Self {
        let (n_layers, n_heads, d_hidden, d_ff) = preset.dims();
        Self {
            preset: preset.name().to_string(),
            n_layers,
            n_heads,
            d_hidden,
            d_ff,
            max_len,
            vocab_size,
            type_vocab_size: 2,
            dropout_p: 0.1,
            attention_dropout_p: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
            tied_embeddings: true,
            include_embedding_layer: false,
            head: HeadSpec::None,
        }
    }

    pub fn with_head(mut self, head: HeadSpec) -> Self {
        self.head = head;
        self
    }

    pub fn with_objective(self, kind: ObjectiveKind) -> Self {
        let head = HeadSpec::for_objective(kind, self.vocab_size);
        self.with_head(head)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_heads == 0 || !self.d_hidden.is_multiple_of(self.n_heads) {
            return bad(format!("d_hidden {} not divisible by n_heads {}", self.d_hidden, self.n_heads));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return bad("zero-sized dimension".into());
        }
        for p in [self.dropout_p, self.attention_dropout_p] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout {p} outside [0, 1)"));
            }
        }
        match self.head {
            HeadSpec::Token { classes } | HeadSpec::Sequence { classes } if classes == 0 => {
                bad("head with zero classes".into())
            }
            _ => Ok(()),
        }
    }

    /// Number of output categories of the head, if any.
    pub fn label_space(&self) -> Option<usize> {
        match self.head {
            HeadSpec::None => None,
            HeadSpec::Mlm => Some(self.vocab_size),
            HeadSpec::Token { classes } | HeadSpec::Sequence { classes } => Some(classes),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_hidden / self.n_heads
    }

    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Closed-form parameter count of the layout.
    pub fn parameter_count(&self) -> usize {
        layout(self).iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn decay(&self) -> bool {
        self.init == Init::Normal
    }
}

/// Every parameter of a configuration, in storage order.
pub(crate) fn layout(c: &ModelConfig) -> Vec<ParamSpec> {
    let (d, ff) = (c.d_hidden, c.d_ff);
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push(ParamSpec { name, shape, init });
    push("embeddings.word".into(), vec![c.vocab_size, d], Init::Normal);
    push("embeddings.position".into(), vec![c.max_len, d], Init::Normal);
    push("embeddings.token_type".into(), vec![c.type_vocab_size, d], Init::Normal);
    push("embeddings.norm.gain".into(), vec![d], Init::Ones);
    push("embeddings.norm.bias".into(), vec![d], Init::Zeros);
    for l in 0..c.n_layers {
        for proj in ["query", "key", "value", "output"] {
            push(format!("layer.{l}.attention.{proj}.weight"), vec![d, d], Init::Normal);
            // a key bias shifts every score of a query equally, so softmax cancels it
            if proj != "key" {
                push(format!("layer.{l}.attention.{proj}.bias"), vec![d], Init::Zeros);
            }
        }
        push(format!("layer.{l}.attention.norm.gain"), vec![d], Init::Ones);
        push(format!("layer.{l}.attention.norm.bias"), vec![d], Init::Zeros);
        push(format!("layer.{l}.ffn.inner.weight"), vec![d, ff], Init::Normal);
        push(format!("layer.{l}.ffn.inner.bias"), vec![ff], Init::Zeros);
        push(format!("layer.{l}.ffn.outer.weight"), vec![ff, d], Init::Normal);
        push(format!("layer.{l}.ffn.outer.bias"), vec![d], Init::Zeros);
        push(format!("layer.{l}.ffn.norm.gain"), vec![d], Init::Ones);
        push(format!("layer.{l}.ffn.norm.bias"), vec![d], Init::Zeros);
    }
    match c.head {
        HeadSpec::None => {}
        HeadSpec::Mlm => {
            push("head.mlm.transform.weight".into(), vec![d, d], Init::Normal);
            push("head.mlm.transform.bias".into(), vec![d], Init::Zeros);
            push("head.mlm.norm.gain".into(), vec![d], Init::Ones);
            push("head.mlm.norm.bias".into(), vec![d], Init::Zeros);
            if !c.tied_embeddings {
                push("head.mlm.decoder.weight".into(), vec![d, c.vocab_size], Init::Normal);
            }
            push("head.mlm.decoder.bias".into(), vec![c.vocab_size], Init::Zeros);
        }
        HeadSpec::Token { classes } => {
            push("head.token.weight".into(), vec![d, classes], Init::Normal);
            push("head.token.bias".into(), vec![classes], Init::Zeros);
        }
        HeadSpec::Sequence { classes } => {
            push("head.seq.pooler.weight".into(), vec![d, d], Init::Normal);
            push("head.seq.pooler.bias".into(), vec![d], Init::Zeros);
            push("head.seq.classifier.weight".into(), vec![d, classes], Init::Normal);
            push("head.seq.classifier.bias".into(), vec![classes], Init::Zeros);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub query: (ParamId, ParamId),
    pub key: ParamId,
    pub value: (ParamId, ParamId),
    pub output: (ParamId, ParamId),
    pub attn_norm: (ParamId, ParamId),
    pub inner: (ParamId, ParamId),
    pub outer: (ParamId, ParamId),
    pub ffn_norm: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub(crate) enum HeadIds {
    None,
    Mlm { transform: (ParamId, ParamId), norm: (ParamId, ParamId), decoder: Option<ParamId>, bias: ParamId },
    Token { proj: (ParamId, ParamId) },
    Sequence { pooler: (ParamId, ParamId), classifier: (ParamId, ParamId) },
}

#[derive(Clone, Debug)]
pub(crate) struct ModelIds {
    pub word: ParamId,
    pub position: ParamId,
    pub token_type: ParamId,
    pub emb_norm: (ParamId, ParamId),
    pub blocks: Vec<BlockIds>,
    pub head: HeadIds,
}

impl ModelIds {
    fn resolve<T: Real>(c: &ModelConfig, store: &ParamStore<T>) -> Self {
        let id = |name: &str| store.find(name).expect("layout parameter present");
        let pair = |prefix: &str, a: &str, b: &str| (id(&format!("{prefix}.{a}")), id(&format!("{prefix}.{b}")));
        let blocks = (0..c.n_layers)
            .map(|l| {
                let p = |s: &str| format!("layer.{l}.{s}");
                BlockIds {
                    query: pair(&p("attention.query"), "weight", "bias"),
                    key: id(&p("attention.key.weight")),
                    value: pair(&p("attention.value"), "weight", "bias"),
                    output: pair(&p("attention.output"), "weight", "bias"),
                    attn_norm: pair(&p("attention.norm"), "gain", "bias"),
                    inner: pair(&p("ffn.inner"), "weight", "bias"),
                    outer: pair(&p("ffn.outer"), "weight", "bias"),
                    ffn_norm: pair(&p("ffn.norm"), "gain", "bias"),
                }
            })
            .collect();
        let head = match c.head {
            HeadSpec::None => HeadIds::None,
            HeadSpec::Mlm => HeadIds::Mlm {
                transform: pair("head.mlm.transform", "weight", "bias"),
                norm: pair("head.mlm.norm", "gain", "bias"),
                decoder: store.find("head.mlm.decoder.weight"),
                bias: id("head.mlm.decoder.bias"),
            },
            HeadSpec::Token { .. } => HeadIds::Token { proj: pair("head.token", "weight", "bias") },
            HeadSpec::Sequence { .. } => HeadIds::Sequence {
                pooler: pair("head.seq.pooler", "weight", "bias"),
                classifier: pair("head.seq.classifier", "weight", "bias"),
            },
        };
        Self {
            word: id("embeddings.word"),
            position: id("embeddings.position"),
            token_type: id("embeddings.token_type"),
            emb_norm: pair("embeddings.norm", "gain", "bias"),
            blocks,
            head,
        }
    }
}

/// Encoder parameters plus the index of named parameter slots.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: ModelIds,
}

fn truncated_normal(std: f64, seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(&mut rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect()
}

use rand::SeedableRng;

impl<T: Real> Model<T> {
    /// Builds a model by asking `make` for every parameter in layout order.
    pub(crate) fn build<F>(config: ModelConfig, mut make: F) -> Result<Self>
    where
        F: FnMut(usize, &ParamSpec) -> Result<Tensor<T>>,
    {
        config.validate()?;
        let mut params = ParamStore::new();
        for (i, spec) in layout(&config).iter().enumerate() {
            let t = make(i, spec)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::ShapeMismatch(format!(
                    "{}: expected {:?}, found {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
            params.add(spec.name.clone(), t, spec.decay());
        }
        let ids = ModelIds::resolve(&config, &params);
        Ok(Self { config, params, ids })
    }

    /// Weights ~ N(0, std²) truncated at ±2σ, biases 0, norm gains 1.
    /// Each parameter draws from its own stream keyed by its name.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let std = config.init_std;
        Self::build(config, |_, spec| init_tensor(spec, std, seed))
    }

    /// Same encoder with a different head; parameters whose name and shape
    /// survive are copied, the rest are freshly initialized from `seed`.
    pub fn with_head(&self, head: HeadSpec, seed: u64) -> Result<Self> {
        let config = self.config.clone().with_head(head);
        let std = config.init_std;
        Self::build(config, |_, spec| match self.params.find(&spec.name) {
            Some(id) if self.params.value(id).shape() == spec.shape.as_slice() => Ok(self.params.value(id).clone()),
            _ => init_tensor(spec, std, seed),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Sets hidden and attention dropout.
    pub fn set_dropout(&mut self, p: f64) {
        self.config.dropout_p = p;
        self.config.attention_dropout_p = p;
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), ids: self.ids.clone() }
    }
}

fn init_tensor<T: Real>(spec: &ParamSpec, std: f64, seed: u64) -> Result<Tensor<T>> {
    let n = spec.shape.iter().product();
    Ok(match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::full(&spec.shape, T::one()),
        Init::Normal => {
            let name_key = crate::rng::splitmix64(
                spec.name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3)),
            );
            let values = truncated_normal(std, rng::derive_seed(seed, tags::INIT, &[name_key]), n);
            Tensor::from_f64(&spec.shape, &values)?
        }
    })
}
