use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ProbeConfig, ProbeError, Result};
use crate::rng::{self, tags};
use crate::tensor::{ParamId, ParamStore, Real, Tensor};
use crate::training::{adam_step, OptimState, TrainConfig};

/// Row-major feature matrix with integer labels.
#[derive(Clone, Copy, Debug)]
pub struct Labeled<'a> {
    pub x: &'a [f32],
    pub y: &'a [usize],
}

impl Labeled<'_> {
    fn n(&self) -> usize {
        self.y.len()
    }
}

/// `dim → hidden (ReLU) → classes` classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    /// Per-feature affine map applied before the first layer:
    /// `(x − shift) · scale`. Identity when standardization is off.
    pub shift: Vec<f32>,
    pub scale: Vec<f32>,
    pub val_accuracy: f64,
    pub epochs_run: usize,
}

struct Ids {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

fn logits(
    store: &ParamStore<f32>,
    ids: &Ids,
    x: &[f32],
    n: usize,
    dim: usize,
    hidden: usize,
    classes: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut h = vec![0f32; n * hidden];
    for row in h.chunks_exact_mut(hidden) {
        row.copy_from_slice(store.value(ids.b1).data());
    }
    f32::gemm(n, dim, hidden, x, (dim, 1), store.value(ids.w1).data(), (hidden, 1), 1.0, &mut h);
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut z = vec![0f32; n * classes];
    for row in z.chunks_exact_mut(classes) {
        row.copy_from_slice(store.value(ids.b2).data());
    }
    f32::gemm(n, hidden, classes, &h, (hidden, 1), store.value(ids.w2).data(), (classes, 1), 1.0, &mut z);
    (h, z)
}

/// Gradients of the mean cross-entropy w.r.t. `[w1, b1, w2, b2]`.
fn gradients(
    store: &ParamStore<f32>,
    ids: &Ids,
    x: &[f32],
    y: &[usize],
    dim: usize,
    hidden: usize,
    classes: usize,
) -> [Vec<f32>; 4] {
    let b = y.len();
    let (h, z) = logits(store, ids, x, b, dim, hidden, classes);
    // dz = (softmax(z) − onehot(y)) / b
    let mut dz = z;
    for (r, &label) in dz.chunks_exact_mut(classes).zip(y) {
        let max = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in r.iter_mut() {
            *v /= sum * b as f32;
        }
        r[label] -= 1.0 / b as f32;
    }
    let mut gw2 = vec![0f32; hidden * classes];
    f32::gemm(hidden, b, classes, &h, (1, hidden), &dz, (classes, 1), 0.0, &mut gw2);
    let mut gb2 = vec![0f32; classes];
    for r in dz.chunks_exact(classes) {
        gb2.iter_mut().zip(r).for_each(|(g, v)| *g += v);
    }
    let mut dh = vec![0f32; b * hidden];
    f32::gemm(b, classes, hidden, &dz, (classes, 1), store.value(ids.w2).data(), (1, classes), 0.0, &mut dh);
    dh.iter_mut().zip(&h).for_each(|(d, &a)| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
    let mut gw1 = vec![0f32; dim * hidden];
    f32::gemm(dim, b, hidden, x, (1, dim), &dh, (hidden, 1), 0.0, &mut gw1);
    let mut gb1 = vec![0f32; hidden];
    for r in dh.chunks_exact(hidden) {
        gb1.iter_mut().zip(r).for_each(|(g, v)| *g += v);
    }
    [gw1, gb1, gw2, gb2]
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Probe {
    fn store(&self) -> (ParamStore<f32>, Ids) {
        let mut s = ParamStore::new();
        let t = |shape: &[usize], d: &[f32]| Tensor::new(shape.to_vec(), d.to_vec()).expect("probe shape");
        let ids = Ids {
            w1: s.add("w1", t(&[self.dim, self.hidden], &self.w1), false),
            b1: s.add("b1", t(&[self.hidden], &self.b1), false),
            w2: s.add("w2", t(&[self.hidden, self.classes], &self.w2), false),
            b2: s.add("b2", t(&[self.classes], &self.b2), false),
        };
        (s, ids)
    }

    fn transform(&self, x: &[f32]) -> Vec<f32> {
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(self.dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - m) * s;
            }
        }
        out
    }

    pub fn predict(&self, x: &[f32]) -> Vec<usize> {
        let n = x.len() / self.dim;
        let (s, ids) = self.store();
        let (_, z) = logits(&s, &ids, &self.transform(x), n, self.dim, self.hidden, self.classes);
        z.chunks_exact(self.classes).map(argmax).collect()
    }

    /// Accuracy in percent.
    pub fn accuracy(&self, data: Labeled<'_>) -> f64 {
        let preds = self.predict(data.x);
        let hits = preds.iter().zip(data.y).filter(|(p, g)| p == g).count();
        100.0 * hits as f64 / data.n().max(1) as f64
    }
}

fn accuracy_of(
    store: &ParamStore<f32>,
    ids: &Ids,
    data: Labeled<'_>,
    dim: usize,
    hidden: usize,
    classes: usize,
) -> f64 {
    let (_, z) = logits(store, ids, data.x, data.n(), dim, hidden, classes);
    let hits = z.chunks_exact(classes).zip(data.y).filter(|(r, &g)| argmax(r) == g).count();
    100.0 * hits as f64 / data.n().max(1) as f64
}

/// Mean and inverse standard deviation of each column. Constant columns
/// keep scale 1.
fn feature_stats(x: &[f32], dim: usize) -> (Vec<f32>, Vec<f32>) {
    let n = (x.len() / dim) as f64;
    let mut mean = vec![0f64; dim];
    for row in x.chunks_exact(dim) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; dim];
    for row in x.chunks_exact(dim) {
        var.iter_mut().zip(row).zip(&mean).for_each(|((s, &v), m)| *s += (v as f64 - m).powi(2));
    }
    let scale = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-8 {
                (1.0 / sd) as f32
            } else {
                1.0
            }
        })
        .collect();
    (mean.into_iter().map(|m| m as f32).collect(), scale)
}

/// Trains an MLP probe on frozen features with Adam, keeping the weights of
/// the best validation epoch. Stops once more than `patience` consecutive
/// epochs pass without improvement.
pub fn train_probe(
    train: Labeled<'_>,
    val: Labeled<'_>,
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Probe> {
    let n = train.n();
    if n == 0 || val.n() == 0 {
        return Err(ProbeError::EmptyInput("probe split".into()));
    }
    if !train.x.len().is_multiple_of(n) || val.x.len() != val.n() * (train.x.len() / n) {
        return Err(ProbeError::EmptyInput("feature extents disagree".into()));
    }
    let dim = train.x.len() / n;
    if classes < 2 || train.y.iter().any(|&y| y >= classes) || val.y.iter().any(|&y| y >= classes) {
        return Err(ProbeError::SingleClass);
    }
    if train.y.iter().all(|&y| y == train.y[0]) {
        return Err(ProbeError::SingleClass);
    }
    let hidden = cfg.hidden;
    let mut init = rng::stream(seed, tags::PROBE, &[0]);
    let mut uniform = |fan_in: usize, fan_out: usize, len: usize| -> Vec<f32> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..len).map(|_| init.gen_range(-a..a) as f32).collect()
    };
    let mut probe = Probe {
        dim,
        hidden,
        classes,
        w1: uniform(dim, hidden, dim * hidden),
        b1: vec![0.0; hidden],
        w2: uniform(hidden, classes, hidden * classes),
        b2: vec![0.0; classes],
        shift: vec![0.0; dim],
        scale: vec![1.0; dim],
        val_accuracy: 0.0,
        epochs_run: 0,
    };
    if cfg.standardize {
        (probe.shift, probe.scale) = feature_stats(train.x, dim);
    }
    let train_x = probe.transform(train.x);
    let val_x = probe.transform(val.x);
    let train = Labeled { x: &train_x, y: train.y };
    let val = Labeled { x: &val_x, y: val.y };
    let (mut store, ids) = probe.store();
    let opt_cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
    let mut state = OptimState::new(&store);
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut xb = Vec::new();
    let mut yb = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        probe.epochs_run = epoch;
        order.shuffle(&mut rng::stream(seed, tags::PROBE, &[1, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            xb.clear();
            for &i in chunk {
                xb.extend_from_slice(&train.x[i * dim..(i + 1) * dim]);
            }
            yb.clear();
            yb.extend(chunk.iter().map(|&i| train.y[i]));
            let [gw1, gb1, gw2, gb2] = gradients(&store, &ids, &xb, &yb, dim, hidden, classes);
            store.get_mut(ids.w1).grad = gw1;
            store.get_mut(ids.b1).grad = gb1;
            store.get_mut(ids.w2).grad = gw2;
            store.get_mut(ids.b2).grad = gb2;
            adam_step(&mut store, &mut state, cfg.lr, &opt_cfg).map_err(|e| ProbeError::Numeric(e.to_string()))?;
        }
        let acc = accuracy_of(&store, &ids, val, dim, hidden, classes);
        if best.as_ref().is_none_or(|b| acc > b.0) {
            best = Some((acc, store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    let (acc, kept) = best.expect("at least one epoch");
    probe.val_accuracy = acc;
    probe.w1 = kept.value(ids.w1).data().to_vec();
    probe.b1 = kept.value(ids.b1).data().to_vec();
    probe.w2 = kept.value(ids.w2).data().to_vec();
    probe.b2 = kept.value(ids.b2).data().to_vec();
    Ok(probe)
}
