use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::extract::{extract_cls_reps, LayerReps};
use super::probe::{train_probe, Labeled};
use super::{ProbeConfig, ProbeError, ProbeTaskDataset, Result, Selection, Split};
use crate::model::Model;
use crate::tokenizer::Vocab;
use crate::training::metrics::mean_std;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Percent.
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub layer: usize,
    pub seeds: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub checkpoint_id: String,
    /// Pre-training objective of the probed checkpoint, if known.
    pub objective: Option<String>,
    pub task: String,
    pub selection: Selection,
    pub layers: Vec<LayerResult>,
    /// Chosen layer for each seed, in seed order.
    pub best_layer_per_seed: Vec<usize>,
    /// Mean and sample std over seeds of test accuracy at the chosen layer.
    pub headline_mean: f64,
    pub headline_std: f64,
    pub truncated: usize,
}

/// Layer with the highest score; the lowest layer wins ties.
pub fn select_best_layer(scores: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(layer, s) in scores {
        match best {
            Some((bl, bs)) if s < bs || (s == bs && layer > bl) => {}
            _ => best = Some((layer, s)),
        }
    }
    best.map(|b| b.0)
}

impl ProbeReport {
    /// Fills in best layers and the headline from `layers`.
    pub fn finish(mut self) -> Self {
        let n_seeds = self.layers.first().map_or(0, |l| l.seeds.len());
        let mut best = Vec::with_capacity(n_seeds);
        let mut heads = Vec::with_capacity(n_seeds);
        for s in 0..n_seeds {
            let scores: Vec<(usize, f64)> = self
                .layers
                .iter()
                .map(|l| {
                    let r = &l.seeds[s];
                    (l.layer, if self.selection == Selection::Validation { r.val_acc } else { r.test_acc })
                })
                .collect();
            let layer = select_best_layer(&scores).expect("at least one layer");
            let test = self.layers.iter().find(|l| l.layer == layer).expect("chosen layer").seeds[s].test_acc;
            best.push(layer);
            heads.push(test);
        }
        let (m, sd) = mean_std(&heads);
        self.best_layer_per_seed = best;
        self.headline_mean = m;
        self.headline_std = sd;
        self
    }

    /// Row label used in comparison grids.
    pub fn row_label(&self) -> &str {
        self.objective.as_deref().unwrap_or(&self.checkpoint_id)
    }
}

/// Trains one probe per (layer, seed) on precomputed representations.
/// Jobs run on a pool of `jobs` threads; results do not depend on `jobs`.
pub fn probe_reps(
    reps_by_split: [&LayerReps; 3],
    labels_by_split: [&[usize]; 3],
    classes: usize,
    cfg: &ProbeConfig,
    jobs: usize,
) -> Result<Vec<LayerResult>> {
    let [tr, va, te] = reps_by_split;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ProbeError::ThreadPool(e.to_string()))?;
    let work: Vec<(usize, u64)> = (0..tr.layers.len()).flat_map(|l| cfg.seeds.iter().map(move |&s| (l, s))).collect();
    let results: Vec<SeedResult> = pool.install(|| {
        work.par_iter()
            .map(|&(l, seed)| {
                let train = Labeled { x: &tr.matrices[l], y: labels_by_split[0] };
                let val = Labeled { x: &va.matrices[l], y: labels_by_split[1] };
                let test = Labeled { x: &te.matrices[l], y: labels_by_split[2] };
                let probe = train_probe(train, val, classes, cfg, seed)?;
                Ok(SeedResult { seed, val_acc: probe.val_accuracy, test_acc: probe.accuracy(test) })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let per_layer = cfg.seeds.len();
    Ok(tr
        .layers
        .iter()
        .enumerate()
        .map(|(i, &layer)| LayerResult { layer, seeds: results[i * per_layer..(i + 1) * per_layer].to_vec() })
        .collect())
}

/// Extracts representations for every split and probes every layer.
pub fn probe_all_layers(
    model: &Model<f32>,
    vocab: &Vocab,
    task: &ProbeTaskDataset,
    cfg: &ProbeConfig,
    checkpoint_id: &str,
    objective: Option<String>,
    jobs: usize,
) -> Result<ProbeReport> {
    if cfg.seeds.is_empty() {
        return Err(ProbeError::EmptyInput("no probe seeds".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ProbeError::ThreadPool(e.to_string()))?;
    let mut reps = Vec::with_capacity(3);
    let mut labels = Vec::with_capacity(3);
    for split in Split::ALL {
        let (sentences, y) = task.split(split);
        reps.push(pool.install(|| extract_cls_reps(model, vocab, &sentences, cfg.include_embeddings))?);
        labels.push(y);
    }
    let truncated = reps.iter().map(|r| r.truncated).sum();
    let layers =
        probe_reps([&reps[0], &reps[1], &reps[2]], [&labels[0], &labels[1], &labels[2]], task.labels.len(), cfg, jobs)?;
    Ok(ProbeReport {
        checkpoint_id: checkpoint_id.to_string(),
        objective,
        task: task.name.clone(),
        selection: cfg.selection,
        layers,
        best_layer_per_seed: Vec::new(),
        headline_mean: 0.0,
        headline_std: 0.0,
        truncated,
    }
    .finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    /// Highest mean in its column (all tied maxima are flagged).
    pub best: bool,
}

/// Rows are objectives (or checkpoints), columns are tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonGrid {
    pub tasks: Vec<String>,
    pub rows: Vec<(String, Vec<Cell>)>,
}

/// One cell's worth of input to a comparison grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub row: String,
    pub task: String,
    pub mean: f64,
    pub std: f64,
}

impl From<&ProbeReport> for GridEntry {
    fn from(r: &ProbeReport) -> Self {
        Self { row: r.row_label().to_string(), task: r.task.clone(), mean: r.headline_mean, std: r.headline_std }
    }
}

/// Folds probe reports into a grid. Every row must cover the same task set.
pub fn aggregate_runs(reports: &[ProbeReport]) -> Result<ComparisonGrid> {
    aggregate_entries(&reports.iter().map(GridEntry::from).collect::<Vec<_>>())
}

/// Rows keep first-appearance order; tasks are sorted by name.
pub fn aggregate_entries(entries: &[GridEntry]) -> Result<ComparisonGrid> {
    if entries.is_empty() {
        return Err(ProbeError::EmptyInput("no reports to aggregate".into()));
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, BTreeMap<String, (f64, f64)>> = BTreeMap::new();
    for e in entries {
        if !order.contains(&e.row) {
            order.push(e.row.clone());
        }
        let cells = rows.entry(e.row.clone()).or_default();
        if cells.insert(e.task.clone(), (e.mean, e.std)).is_some() {
            return Err(ProbeError::Mismatch(format!("{} has two reports for {}", e.row, e.task)));
        }
    }
    let tasks: Vec<String> = rows[&order[0]].keys().cloned().collect();
    for label in &order {
        let these: Vec<&String> = rows[label].keys().collect();
        if these.iter().map(|s| s.as_str()).ne(tasks.iter().map(String::as_str)) {
            return Err(ProbeError::Mismatch(format!("{label} covers {these:?}, {} covers {tasks:?}", order[0])));
        }
    }
    let maxima: Vec<f64> =
        tasks.iter().map(|t| order.iter().map(|l| rows[l][t].0).fold(f64::NEG_INFINITY, f64::max)).collect();
    let grid_rows = order
        .iter()
        .map(|l| {
            let cells = tasks
                .iter()
                .zip(&maxima)
                .map(|(t, &max)| {
                    let (mean, std) = rows[l][t];
                    Cell { mean, std, best: mean == max }
                })
                .collect();
            (l.clone(), cells)
        })
        .collect();
    Ok(ComparisonGrid { tasks, rows: grid_rows })
}

impl ComparisonGrid {
    /// Markdown table, column maxima in bold.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| objective |");
        for t in &self.tasks {
            let _ = write!(out, " {t} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.tasks.len()));
        out.push('\n');
        for (label, cells) in &self.rows {
            let _ = write!(out, "| {label} |");
            for c in cells {
                let v = format!("{:.1} ± {:.1}", c.mean, c.std);
                if c.best {
                    let _ = write!(out, " **{v}** |");
                } else {
                    let _ = write!(out, " {v} |");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("objective,task,mean,std,best\n");
        for (label, cells) in &self.rows {
            for (t, c) in self.tasks.iter().zip(cells) {
                let _ = writeln!(out, "{label},{t},{},{},{}", c.mean, c.std, c.best);
            }
        }
        out
    }
}
