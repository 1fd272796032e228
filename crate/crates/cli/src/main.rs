//! `probelab`: corpus → vocabulary → shards → pre-training → probing and
//! fine-tuning → reports.
//!
//! Exit codes: 1 usage or config error, 2 data error, 3 numeric failure.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use probelab::model::Preset;
use probelab::objectives::{ObjectiveKind, RandomLabelMode};
use probelab::probing::Selection;
use probelab::training::Headline;

use config::parse_value;

#[derive(Debug, Parser)]
#[command(
    name = "probelab",
    version,
    about = "Pre-train small encoders under different objectives and probe what they learn"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
struct Common {
    /// JSON run config; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus from the built-in grammar.
    SynthCorpus(SynthArgs),
    /// Train a BPE vocabulary on a corpus.
    TokenizerTrain(TokenizerArgs),
    /// Write pre-generated training examples for one objective.
    Shard(ShardArgs),
    /// Pre-train an encoder.
    Pretrain(PretrainArgs),
    /// Probe every layer of a checkpoint on one or more tasks.
    Probe(ProbeArgs),
    /// Fine-tune a checkpoint on a sentence (pair) task over several seeds.
    Finetune(FinetuneArgs),
    /// Render probe or fine-tuning results as one comparison grid.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of documents.
    #[arg(long)]
    docs: Option<usize>,
}

#[derive(Debug, Args)]
struct TokenizerArgs {
    #[command(flatten)]
    common: Common,
    /// Plain-text corpus, one document per blank-line-separated block.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Target vocabulary size including specials.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Keep case instead of lowercasing.
    #[arg(long)]
    no_lowercase: bool,
}

#[derive(Debug, Args)]
struct ShardArgs {
    #[command(flatten)]
    common: Common,
    /// Plain-text corpus to pack into sequences.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Vocabulary from `tokenizer-train`.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// mlm, sr, first-char, ascii or random.
    #[arg(long, value_parser = parse_value::<ObjectiveKind>)]
    objective: Option<ObjectiveKind>,
    /// Sequence length including [CLS] and [SEP].
    #[arg(long)]
    max_len: Option<usize>,
    /// Number of corruption epochs to materialize.
    #[arg(long)]
    epochs: Option<u64>,
    /// fixed or resampled.
    #[arg(long, value_parser = parse_value::<RandomLabelMode>)]
    random_labels: Option<RandomLabelMode>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Plain-text corpus; the built-in grammar corpus is used when neither
    /// this nor --shard is given.
    #[arg(long, conflicts_with = "shard")]
    corpus: Option<PathBuf>,
    /// Pre-generated examples from `shard`.
    #[arg(long)]
    shard: Option<PathBuf>,
    /// Vocabulary; trained on the corpus when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// mlm, sr, first-char, ascii or random.
    #[arg(long, value_parser = parse_value::<ObjectiveKind>)]
    objective: Option<ObjectiveKind>,
    /// base, medium, small or tiny.
    #[arg(long, value_parser = parse_value::<Preset>)]
    preset: Option<Preset>,
    /// Sequence length including [CLS] and [SEP].
    #[arg(long)]
    max_len: Option<usize>,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Sequences per step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Linear warmup steps before linear decay.
    #[arg(long)]
    warmup: Option<u64>,
    /// Dropout probability for hidden and attention layers.
    #[arg(long)]
    dropout: Option<f64>,
    /// Decoupled weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Global gradient-norm clip.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// fixed or resampled (random objective only).
    #[arg(long, value_parser = parse_value::<RandomLabelMode>)]
    random_labels: Option<RandomLabelMode>,
    /// Print the loss every N steps (0 silences progress).
    #[arg(long)]
    log_every: Option<u64>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory; never modified.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Vocabulary the checkpoint was trained with.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Task TSV file (`split \t label \t sentence`); repeatable.
    #[arg(long = "task")]
    tasks: Vec<PathBuf>,
    /// Built-in synthetic task: sentlen or bshift; repeatable.
    #[arg(long = "synthetic")]
    synthetic: Vec<String>,
    /// Comma-separated probe seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// validation or test.
    #[arg(long, value_parser = parse_value::<Selection>)]
    selection: Option<Selection>,
    /// Also probe the embedding output as layer 0.
    #[arg(long)]
    include_embeddings: bool,
    /// Feed raw [CLS] vectors to the probe.
    #[arg(long)]
    no_standardize: bool,
    /// Probe training epochs before early stopping.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Worker threads for the (layer, seed) probe jobs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory; never modified.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Vocabulary the checkpoint was trained with.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Task TSV (`split \t label \t sentence [\t sentence]`).
    #[arg(long)]
    task: Option<PathBuf>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Examples per step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Upper bound on training epochs.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Comma-separated fine-tuning seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Real-valued labels, mean squared error.
    #[arg(long)]
    regression: bool,
    /// accuracy, f1, matthews or spearman.
    #[arg(long, value_parser = parse_value::<Headline>)]
    headline: Option<Headline>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Format {
    Markdown,
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Result JSON files or directories holding them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Markdown)]
    format: Format,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
