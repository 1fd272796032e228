use std::fs;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use probelab::model::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig};
use probelab::objectives::{read_shard, write_shard, ExampleGenerator, ShardManifest, TrainingExample};
use probelab::probing::{
    aggregate_entries, gen_synthetic_bshift, gen_synthetic_sentlen, load_task_tsv, probe_all_layers, GridEntry,
    ProbeReport, ProbeTaskDataset, Split,
};
use probelab::synth::{self, GrammarConfig};
use probelab::tokenizer::{pack_corpus, train_bpe, BpeOptions, PackedSequence, Vocab};
use probelab::training::{
    finetune, pretrain, EvalMetrics, ExampleSource, Headline, TaskDataset, TaskExample, TaskKind, TaskLabel,
    TrainConfig, TrainError,
};

use crate::config::{self, set, RunConfig};
use crate::error::{at, CliError, Result};
use crate::manifest::{RunManifest, RUN_MANIFEST};
use crate::{
    Command, Common, FinetuneArgs, Format, PretrainArgs, ProbeArgs, ReportArgs, ShardArgs, SynthArgs, TokenizerArgs,
};

pub const CORPUS_FILE: &str = "corpus.txt";
pub const VOCAB_FILE: &str = "vocab.json";
pub const SHARD_FILE: &str = "shard.bin";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LAST_GOOD_DIR: &str = "last-good";
pub const LOSS_FILE: &str = "loss.csv";
const DEFAULT_OUT: &str = "out";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthCorpus(a) => synth_corpus(a),
        Command::TokenizerTrain(a) => tokenizer_train(a),
        Command::Shard(a) => shard(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Probe(a) => probe(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Report(a) => report(a),
    }
}

/// Loads the config, applies the shared flags and resolves seed and output
/// directory into it, so the manifest records what was actually used.
struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

fn context(common: Common) -> Result<Ctx> {
    let mut cfg = config::load(common.config.as_deref())?;
    let seed = common.seed.or(cfg.master_seed).unwrap_or(0);
    let out = common.out.or_else(|| cfg.paths.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    cfg.master_seed = Some(seed);
    cfg.paths.out = Some(out.clone());
    Ok(Ctx { cfg, seed, out })
}

impl Ctx {
    fn create_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(at(&self.out))
    }
}

fn required(slot: &Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf> {
    slot.clone()
        .ok_or_else(|| CliError::Usage(format!("{what} needs {flag} or paths.{}", flag.trim_start_matches("--"))))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(at(path))
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::load(path).map_err(at(path))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(at(path))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(at(path))
}

/// A checkpoint trained on one vocabulary cannot be read with another.
fn check_vocab(ckpt: &Checkpoint, vocab: &Vocab) -> Result<()> {
    let have = vocab.content_hash();
    if let Some(want) = &ckpt.vocab_hash {
        if *want != have {
            return Err(CliError::Usage(format!(
                "vocab hash mismatch: checkpoint was trained with {want}, supplied vocab is {have}"
            )));
        }
    }
    if ckpt.model.config().vocab_size != vocab.len() {
        return Err(CliError::Usage(format!(
            "vocab size mismatch: checkpoint expects {}, supplied vocab has {}",
            ckpt.model.config().vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

fn synth_corpus(a: SynthArgs) -> Result<()> {
    let mut ctx = context(a.common)?;
    set(&mut ctx.cfg.synth_corpus.docs, a.docs);
    ctx.create_out()?;
    let text = synth::corpus(ctx.cfg.synth_corpus.docs, ctx.seed, &GrammarConfig::default());
    write_file(&ctx.out.join(CORPUS_FILE), &text)?;
    let mut m = RunManifest::new("synth-corpus", ctx.seed, &ctx.cfg);
    m.output(CORPUS_FILE);
    m.write(&ctx.out)?;
    Ok(())
}

fn train_vocab(text: &str, cfg: &RunConfig) -> Result<Vocab> {
    let opts = BpeOptions { lowercase: cfg.tokenizer_train.lowercase, ..BpeOptions::default() };
    Ok(train_bpe(text, cfg.tokenizer_train.vocab_size, &opts)?)
}

fn tokenizer_train(a: TokenizerArgs) -> Result<()> {
    let mut ctx = context(a.common)?;
    set(&mut ctx.cfg.paths.corpus, a.corpus.map(Some));
    set(&mut ctx.cfg.tokenizer_train.vocab_size, a.vocab_size);
    if a.no_lowercase {
        ctx.cfg.tokenizer_train.lowercase = false;
    }
    let corpus = required(&ctx.cfg.paths.corpus, "tokenizer-train", "--corpus")?;
    let text = read_text(&corpus)?;
    let mut m = RunManifest::new("tokenizer-train", ctx.seed, &ctx.cfg);
    m.input("corpus", &corpus)?;
    let vocab = train_vocab(&text, &ctx.cfg)?;
    ctx.create_out()?;
    write_file(&ctx.out.join(VOCAB_FILE), vocab.to_json()?)?;
    m.output(VOCAB_FILE);
    m.write(&ctx.out)?;
    eprintln!("vocab: {} tokens, hash {}", vocab.len(), vocab.content_hash());
    Ok(())
}

fn shard(a: ShardArgs) -> Result<()> {
    let mut ctx = context(a.common)?;
    set(&mut ctx.cfg.paths.corpus, a.corpus.map(Some));
    set(&mut ctx.cfg.paths.vocab, a.vocab.map(Some));
    let s = &mut ctx.cfg.shard;
    set(&mut s.objective, a.objective);
    set(&mut s.max_len, a.max_len);
    set(&mut s.epochs, a.epochs);
    set(&mut s.random_labels, a.random_labels);
    if s.epochs == 0 {
        return Err(CliError::Usage("shard.epochs must be at least 1".into()));
    }
    let corpus = required(&ctx.cfg.paths.corpus, "shard", "--corpus")?;
    let vocab_path = required(&ctx.cfg.paths.vocab, "shard", "--vocab")?;
    let mut m = RunManifest::new("shard", ctx.seed, &ctx.cfg);
    m.input("corpus", &corpus)?;
    m.input("vocab", &vocab_path)?;
    let vocab = load_vocab(&vocab_path)?;
    let s = &ctx.cfg.shard;
    let seqs = pack_corpus(&vocab, &read_text(&corpus)?, s.max_len)?;
    let generator =
        ExampleGenerator { random_labels: s.random_labels, ..ExampleGenerator::new(&vocab, s.objective, ctx.seed) };
    let mut examples = Vec::new();
    let mut skipped = 0;
    for epoch in 0..s.epochs {
        let (ex, sk) = generator.generate_epoch(&seqs, epoch)?;
        examples.extend(ex);
        skipped += sk;
    }
    if examples.is_empty() {
        return Err(CliError::Data(format!("{}: no sequence is usable for {}", corpus.display(), s.objective)));
    }
    let manifest = ShardManifest {
        objective: s.objective,
        master_seed: ctx.seed,
        vocab_hash: vocab.content_hash(),
        vocab_size: vocab.len(),
        max_len: s.max_len,
        record_count: examples.len() as u64,
        epochs: s.epochs,
        random_labels: s.random_labels,
    };
    ctx.create_out()?;
    let path = ctx.out.join(SHARD_FILE);
    let file = fs::File::create(&path).map_err(at(&path))?;
    let mut w = BufWriter::new(file);
    write_shard(&mut w, &manifest, &examples).map_err(at(&path))?;
    w.flush().map_err(at(&path))?;
    m.output(SHARD_FILE);
    m.write(&ctx.out)?;
    eprintln!("shard: {} examples ({skipped} sequences skipped)", examples.len());
    Ok(())
}

/// Training data for `pretrain`: either a pre-generated shard or packed
/// sequences that get fresh corruption every epoch.
enum Data {
    Shard(ShardManifest, Vec<TrainingExample>),
    Sequences(Vec<PackedSequence>),
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let mut ctx = context(a.common)?;
    set(&mut ctx.cfg.paths.corpus, a.corpus.map(Some));
    set(&mut ctx.cfg.paths.shard, a.shard.map(Some));
    set(&mut ctx.cfg.paths.vocab, a.vocab.map(Some));
    let p = &mut ctx.cfg.pretrain;
    set(&mut p.preset, a.preset);
    set(&mut p.steps, a.steps);
    set(&mut p.batch_size, a.batch_size);
    set(&mut p.peak_lr, a.lr);
    set(&mut p.warmup_steps, a.warmup.map(Some));
    set(&mut p.dropout_p, a.dropout);
    set(&mut p.weight_decay, a.weight_decay);
    set(&mut p.grad_clip, a.grad_clip.map(Some));
    set(&mut p.log_every, a.log_every);
    ctx.create_out()?;
    let mut m = RunManifest::new("pretrain", ctx.seed, &());

    let (vocab, data) = if let Some(shard_path) = ctx.cfg.paths.shard.clone() {
        if ctx.cfg.paths.corpus.is_some() {
            return Err(CliError::Usage("give either a corpus or a shard, not both".into()));
        }
        m.input("shard", &shard_path)?;
        let file = fs::File::open(&shard_path).map_err(at(&shard_path))?;
        let (sm, examples) = read_shard(BufReader::new(file)).map_err(at(&shard_path))?;
        // The shard fixes objective, length and labels; flags may only agree.
        let p = &mut ctx.cfg.pretrain;
        for (name, clash) in [
            ("objective", a.objective.is_some_and(|o| o != sm.objective)),
            ("max-len", a.max_len.is_some_and(|l| l != sm.max_len)),
            ("random-labels", a.random_labels.is_some_and(|r| r != sm.random_labels)),
        ] {
            if clash {
                return Err(CliError::Usage(format!("--{name} disagrees with shard {}", shard_path.display())));
            }
        }
        p.objective = sm.objective;
        p.max_len = sm.max_len;
        p.random_labels = sm.random_labels;
        let vocab_path = required(&ctx.cfg.paths.vocab, "pretrain --shard", "--vocab")?;
        m.input("vocab", &vocab_path)?;
        let vocab = load_vocab(&vocab_path)?;
        if vocab.content_hash() != sm.vocab_hash {
            return Err(CliError::Usage(format!(
                "vocab hash mismatch: shard was built with {}, supplied vocab is {}",
                sm.vocab_hash,
                vocab.content_hash()
            )));
        }
        (vocab, Data::Shard(sm, examples))
    } else {
        let p = &mut ctx.cfg.pretrain;
        set(&mut p.objective, a.objective);
        set(&mut p.max_len, a.max_len);
        set(&mut p.random_labels, a.random_labels);
        let text = match &ctx.cfg.paths.corpus {
            Some(path) => {
                m.input("corpus", path)?;
                read_text(path)?
            }
            None => {
                let text = synth::corpus(ctx.cfg.synth_corpus.docs, ctx.seed, &GrammarConfig::default());
                write_file(&ctx.out.join(CORPUS_FILE), &text)?;
                m.generated(
                    "corpus",
                    format!("synthetic grammar, {} documents", ctx.cfg.synth_corpus.docs),
                    text.as_bytes(),
                );
                m.output(CORPUS_FILE);
                text
            }
        };
        let vocab = match &ctx.cfg.paths.vocab {
            Some(path) => {
                m.input("vocab", path)?;
                load_vocab(path)?
            }
            None => {
                let vocab = train_vocab(&text, &ctx.cfg)?;
                write_file(&ctx.out.join(VOCAB_FILE), vocab.to_json()?)?;
                m.output(VOCAB_FILE);
                vocab
            }
        };
        let seqs = pack_corpus(&vocab, &text, ctx.cfg.pretrain.max_len)?;
        (vocab, Data::Sequences(seqs))
    };

    let p = &ctx.cfg.pretrain;
    let train_cfg = p.train_config(ctx.seed);
    let mut model_cfg = ModelConfig::from_preset(p.preset, vocab.len(), p.max_len).with_objective(p.objective);
    model_cfg.tied_embeddings = p.tied_embeddings;
    let model = Model::init(model_cfg, ctx.seed)?;
    let source = match &data {
        Data::Shard(_, examples) => ExampleSource::Fixed(examples),
        Data::Sequences(seqs) => ExampleSource::Generated {
            generator: ExampleGenerator {
                random_labels: p.random_labels,
                ..ExampleGenerator::new(&vocab, p.objective, ctx.seed)
            },
            sequences: seqs,
        },
    };
    if let Data::Shard(sm, _) = &data {
        if sm.master_seed != ctx.seed {
            eprintln!("note: shard was generated with seed {}, training with seed {}", sm.master_seed, ctx.seed);
        }
    }
    eprintln!(
        "pretrain: {} objective, {} preset, {} parameters, {} steps",
        p.objective,
        p.preset,
        model.num_parameters(),
        p.steps
    );
    let log_every = p.log_every;
    let result = pretrain(model, source, &train_cfg, |pt| {
        if log_every > 0 && (pt.step % log_every == 0 || pt.step == 1) {
            eprintln!("step {:>7}  loss {:.4}  lr {:.3e}", pt.step, pt.loss, pt.lr);
        }
    });
    let vocab_hash = Some(vocab.content_hash());
    let trained = match result {
        Ok(t) => t,
        Err(TrainError::NonFiniteLoss { step, mut last_good }) => {
            last_good.vocab_hash = vocab_hash;
            let dir = ctx.out.join(LAST_GOOD_DIR);
            save_checkpoint(&last_good, &dir).map_err(at(&dir))?;
            m.config = serde_json::to_value(&ctx.cfg)?;
            m.output(LAST_GOOD_DIR);
            m.write(&ctx.out)?;
            return Err(CliError::Numeric(format!(
                "non-finite loss at step {step}; last good parameters saved to {}",
                dir.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let mut ckpt = trained.checkpoint;
    ckpt.vocab_hash = vocab_hash;
    let dir = ctx.out.join(CHECKPOINT_DIR);
    save_checkpoint(&ckpt, &dir).map_err(at(&dir))?;
    write_file(&ctx.out.join(LOSS_FILE), trained.curve.to_csv(1))?;
    m.config = serde_json::to_value(&ctx.cfg)?;
    m.output(CHECKPOINT_DIR);
    m.output(LOSS_FILE);
    m.write(&ctx.out)?;
    let window = (p.steps as usize / 10).clamp(1, 100);
    eprintln!(
        "done: loss {:.4} -> {:.4}, checkpoint {}",
        trained.curve.head_mean(window),
        trained.curve.tail_mean(window),
        ckpt.content_hash()
    );
    Ok(())
}

/// `synthetic:sentlen` → `synthetic-sentlen`, safe as a file name.
fn file_stem(task: &str) -> String {
    task.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '-' }).collect()
}

fn probe(a: ProbeArgs) -> Result<()> {
    let mut ctx = context(a.common)?;
    set(&mut ctx.cfg.paths.checkpoint, a.checkpoint.map(Some));
    set(&mut ctx.cfg.paths.vocab, a.vocab.map(Some));
    if !a.tasks.is_empty() {
        ctx.cfg.paths.tasks = a.tasks;
    }
    let pc = &mut ctx.cfg.probe;
    set(&mut pc.seeds, a.seeds);
    set(&mut pc.selection, a.selection);
    set(&mut pc.max_epochs, a.max_epochs);
    if a.include_embeddings {
        pc.include_embeddings = true;
    }
    if a.no_standardize {
        pc.standardize = false;
    }
    if pc.seeds.is_empty() {
        return Err(CliError::Usage("probe.seeds is empty".into()));
    }
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    for s in &a.synthetic {
        if s != "sentlen" && s != "bshift" {
            return Err(CliError::Usage(format!("unknown synthetic task {s:?} (expected sentlen or bshift)")));
        }
    }
    if ctx.cfg.paths.tasks.is_empty() && a.synthetic.is_empty() {
        return Err(CliError::Usage("probe needs --task or --synthetic".into()));
    }
    let ckpt_path = required(&ctx.cfg.paths.checkpoint, "probe", "--checkpoint")?;
    let vocab_path = required(&ctx.cfg.paths.vocab, "probe", "--vocab")?;
    let mut m = RunManifest::new("probe", ctx.seed, &ctx.cfg);
    m.input("checkpoint", &ckpt_path)?;
    m.input("vocab", &vocab_path)?;
    let ckpt = load_ckpt(&ckpt_path)?;
    let vocab = load_vocab(&vocab_path)?;
    check_vocab(&ckpt, &vocab)?;

    let mut tasks: Vec<ProbeTaskDataset> = Vec::new();
    for path in &ctx.cfg.paths.tasks {
        m.input("task", path)?;
        tasks.push(load_task_tsv(path).map_err(at(path))?);
    }
    let st = &ctx.cfg.synthetic_tasks;
    for s in &a.synthetic {
        let task = if s == "sentlen" {
            gen_synthetic_sentlen(&vocab, st.sizes, &st.sentlen_bins, ctx.seed)?
        } else {
            let source = synth::sentences(st.source_sentences, ctx.seed, &GrammarConfig::default());
            gen_synthetic_bshift(&source, st.sizes, ctx.seed)?
        };
        m.generated("task", task.name.clone(), task.to_tsv().as_bytes());
        tasks.push(task);
    }

    ctx.create_out()?;
    let id = ckpt.content_hash();
    let objective = ckpt.objective.map(|o| o.name().to_string());
    for task in &tasks {
        eprintln!(
            "probe {}: {} / {} / {} examples, {} classes",
            task.name,
            task.count(Split::Train),
            task.count(Split::Validation),
            task.count(Split::Test),
            task.labels.len()
        );
        let r = probe_all_layers(&ckpt.model, &vocab, task, &ctx.cfg.probe, &id, objective.clone(), a.jobs)?;
        if r.truncated > 0 {
            eprintln!("note: {} sentences truncated to the model's maximum length", r.truncated);
        }
        eprintln!(
            "  best layers {:?}, test accuracy {:.1} ± {:.1}",
            r.best_layer_per_seed, r.headline_mean, r.headline_std
        );
        let name = format!("probe-{}.json", file_stem(&task.name));
        write_file(&ctx.out.join(&name), serde_json::to_string_pretty(&r)? + "\n")?;
        m.output(name);
    }
    m.write(&ctx.out)?;
    Ok(())
}

/// `split \t label \t sentence [\t sentence]`; labels are class names, or
/// numbers when `regression`.
fn parse_finetune_tsv(path: &Path, regression: bool, vocab: &Vocab, headline: Headline) -> Result<TaskDataset> {
    let text = read_text(path)?;
    let bad = |line: usize, reason: String| CliError::Data(format!("{}: line {line}: {reason}", path.display()));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if !(3..=4).contains(&f.len()) {
            return Err(bad(i + 1, format!("expected 3 or 4 tab-separated fields, got {}", f.len())));
        }
        let split: Split = f[0].trim().parse().map_err(|r| bad(i + 1, r))?;
        let label = f[1].trim();
        if label.is_empty() {
            return Err(bad(i + 1, "empty label".into()));
        }
        if regression && label.parse::<f64>().map_or(true, |x| !x.is_finite()) {
            return Err(bad(i + 1, format!("label {label:?} is not a finite number")));
        }
        rows.push((split, label.to_string(), f[2], f.get(3).copied()));
    }
    let mut classes: Vec<String> = Vec::new();
    if !regression {
        classes = rows.iter().map(|r| r.1.clone()).collect();
        classes.sort();
        classes.dedup();
        if classes.iter().all(|c| c.parse::<i64>().is_ok()) {
            classes.sort_by_key(|c| c.parse::<i64>().expect("numeric"));
        }
    }
    let mut data = TaskDataset {
        name: path.file_stem().and_then(|s| s.to_str()).unwrap_or("task").to_string(),
        kind: if regression { TaskKind::Regression } else { TaskKind::Classification { classes: classes.len() } },
        headline,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (split, label, a, b) in rows {
        let label = if regression {
            TaskLabel::Score(label.parse().expect("checked above"))
        } else {
            TaskLabel::Class(classes.iter().position(|c| *c == label).expect("collected above"))
        };
        let ex = TaskExample { a: vocab.encode(a), b: b.map(|b| vocab.encode(b)), label };
        match split {
            Split::Train => data.train.push(ex),
            Split::Validation => data.validation.push(ex),
            Split::Test => data.test.push(ex),
        }
    }
    for (name, split) in [("train", &data.train), ("validation", &data.validation)] {
        if split.is_empty() {
            return Err(CliError::Data(format!("{}: no {name} rows", path.display())));
        }
    }
    Ok(data)
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let mut ctx = context(a.common)?;
    set(&mut ctx.cfg.paths.checkpoint, a.checkpoint.map(Some));
    set(&mut ctx.cfg.paths.vocab, a.vocab.map(Some));
    if let Some(t) = a.task {
        ctx.cfg.paths.tasks = vec![t];
    }
    let f = &mut ctx.cfg.finetune;
    set(&mut f.lr, a.lr.map(Some));
    set(&mut f.batch_size, a.batch_size.map(Some));
    set(&mut f.max_epochs, a.max_epochs);
    set(&mut f.patience, a.patience);
    set(&mut f.seeds, a.seeds);
    set(&mut f.headline, a.headline.map(Some));
    if a.regression {
        f.regression = true;
    }
    let lr = f.lr.ok_or_else(|| CliError::Usage("finetune.lr is required (--lr)".into()))?;
    let batch_size =
        f.batch_size.ok_or_else(|| CliError::Usage("finetune.batch_size is required (--batch-size)".into()))?;
    let headline = f.headline.unwrap_or(if f.regression { Headline::Spearman } else { Headline::Accuracy });
    if f.regression != (headline == Headline::Spearman) {
        return Err(CliError::Usage(format!("headline {headline:?} does not fit this task kind")));
    }
    let [task_path] = ctx.cfg.paths.tasks.as_slice() else {
        return Err(CliError::Usage("finetune needs exactly one --task".into()));
    };
    let task_path = task_path.clone();
    let ckpt_path = required(&ctx.cfg.paths.checkpoint, "finetune", "--checkpoint")?;
    let vocab_path = required(&ctx.cfg.paths.vocab, "finetune", "--vocab")?;
    let mut m = RunManifest::new("finetune", ctx.seed, &ctx.cfg);
    m.input("checkpoint", &ckpt_path)?;
    m.input("vocab", &vocab_path)?;
    m.input("task", &task_path)?;
    let ckpt = load_ckpt(&ckpt_path)?;
    let vocab = load_vocab(&vocab_path)?;
    check_vocab(&ckpt, &vocab)?;
    let f = &ctx.cfg.finetune;
    let data = parse_finetune_tsv(&task_path, f.regression, &vocab, headline)?;
    let cfg = TrainConfig {
        peak_lr: lr,
        batch_size,
        max_epochs: f.max_epochs,
        patience: f.patience,
        warmup_steps: f.warmup_steps,
        weight_decay: f.weight_decay,
        dropout_p: f.dropout_p,
        master_seed: ctx.seed,
        ..TrainConfig::default()
    };
    let metrics = finetune(&ckpt, &data, &cfg, &f.seeds)?;
    ctx.create_out()?;
    let name = format!("finetune-{}.json", file_stem(&data.name));
    write_file(&ctx.out.join(&name), serde_json::to_string_pretty(&metrics)? + "\n")?;
    m.output(name);
    m.write(&ctx.out)?;
    let show = metrics.test_mean.as_ref().unwrap_or(&metrics.mean).get(headline);
    eprintln!("{} {headline:?}: {show:?}", data.name);
    Ok(())
}

/// One result file: a probe report, fine-tuning metrics, or an array of
/// either.
fn read_entries(path: &Path) -> Result<Vec<GridEntry>> {
    fn try_parse<T: DeserializeOwned>(v: &serde_json::Value) -> Option<Vec<T>> {
        if v.is_array() {
            serde_json::from_value(v.clone()).ok()
        } else {
            serde_json::from_value(v.clone()).ok().map(|x| vec![x])
        }
    }
    let value: serde_json::Value = serde_json::from_str(&read_text(path)?).map_err(at(path))?;
    if let Some(reports) = try_parse::<ProbeReport>(&value) {
        return Ok(reports.iter().map(GridEntry::from).collect());
    }
    if let Some(metrics) = try_parse::<EvalMetrics>(&value) {
        return metrics.iter().map(|e| finetune_entry(e).map_err(|e| e.at(path))).collect();
    }
    Err(CliError::Data(format!("{}: neither a probe report nor fine-tuning metrics", path.display())))
}

/// Headline on test when available, else validation, in percent.
fn finetune_entry(e: &EvalMetrics) -> Result<GridEntry> {
    let (mean, std) = match (&e.test_mean, &e.test_std) {
        (Some(m), Some(s)) => (m, s),
        _ => (&e.mean, &e.std),
    };
    let missing = || CliError::Data(format!("{}: headline {:?} missing", e.task, e.headline));
    Ok(GridEntry {
        row: e.objective.clone().unwrap_or_else(|| e.checkpoint_id.clone()),
        task: e.task.clone(),
        mean: 100.0 * mean.get(e.headline).ok_or_else(missing)?,
        std: 100.0 * std.get(e.headline).unwrap_or(0.0),
    })
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(at(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|x| x == "json") && f.file_name().is_some_and(|n| n != RUN_MANIFEST)
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::Data("no result files found".into()));
    }
    Ok(files)
}

fn report(a: ReportArgs) -> Result<()> {
    let write_out = a.common.out.is_some();
    let ctx = context(a.common)?;
    let files = collect_inputs(&a.inputs)?;
    let mut entries = Vec::new();
    for f in &files {
        entries.extend(read_entries(f)?);
    }
    let grid = aggregate_entries(&entries)?;
    let (text, name) = match a.format {
        Format::Markdown => (grid.to_markdown(), "grid.md"),
        Format::Json => (serde_json::to_string_pretty(&grid)? + "\n", "grid.json"),
        Format::Csv => (grid.to_csv(), "grid.csv"),
    };
    if write_out {
        ctx.create_out()?;
        write_file(&ctx.out.join(name), &text)?;
        let mut m = RunManifest::new("report", ctx.seed, &ctx.cfg);
        for f in &files {
            m.input("result", f)?;
        }
        m.output(name);
        m.write(&ctx.out)?;
    }
    print!("{text}");
    Ok(())
}
