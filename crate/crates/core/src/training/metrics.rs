//! Evaluation metrics.
//!
//! Degenerate conventions: binary F1 is 0 when neither predictions nor gold
//! contain the positive class; Matthews correlation is 0 when its
//! denominator vanishes (some marginal is empty); Spearman correlation is 0
//! when either input is constant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} predictions vs {1} gold labels")]
    LengthMismatch(usize, usize),
    #[error("metric over empty input")]
    Empty,
}

type Result<T> = std::result::Result<T, MetricError>;

fn check(a: usize, b: usize) -> Result<()> {
    if a != b {
        Err(MetricError::LengthMismatch(a, b))
    } else if a == 0 {
        Err(MetricError::Empty)
    } else {
        Ok(())
    }
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn f1_binary(preds: &[usize], golds: &[usize], positive: usize) -> Result<f64> {
    check(preds.len(), golds.len())?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in preds.iter().zip(golds) {
        match (p == positive, g == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Multiclass Matthews correlation (R_K statistic); the usual MCC for two
/// classes.
pub fn matthews(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check(preds.len(), golds.len())?;
    let k = preds.iter().chain(golds).max().map_or(0, |&m| m + 1);
    let mut pk = vec![0f64; k];
    let mut tk = vec![0f64; k];
    let mut correct = 0f64;
    for (&p, &g) in preds.iter().zip(golds) {
        pk[p] += 1.0;
        tk[g] += 1.0;
        if p == g {
            correct += 1.0;
        }
    }
    let s = preds.len() as f64;
    let pt: f64 = pk.iter().zip(&tk).map(|(a, b)| a * b).sum();
    let pp: f64 = pk.iter().map(|a| a * a).sum();
    let tt: f64 = tk.iter().map(|a| a * a).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((correct * s - pt) / denom)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check(x.len(), y.len())?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check(x.len(), y.len())?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Mean and sample (n − 1) standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// The metric a task reports and early-stops on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Headline {
    Accuracy,
    F1,
    Matthews,
    Spearman,
}

/// Metrics of one evaluation; fields not applicable to a task are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub matthews: Option<f64>,
    pub spearman: Option<f64>,
}

impl Metrics {
    pub fn classification(preds: &[usize], golds: &[usize], classes: usize) -> Result<Self> {
        Ok(Self {
            accuracy: Some(accuracy(preds, golds)?),
            f1: if classes == 2 { Some(f1_binary(preds, golds, 1)?) } else { None },
            matthews: Some(matthews(preds, golds)?),
            spearman: None,
        })
    }

    pub fn regression(preds: &[f64], golds: &[f64]) -> Result<Self> {
        Ok(Self { spearman: Some(spearman(preds, golds)?), ..Self::default() })
    }

    pub fn get(&self, h: Headline) -> Option<f64> {
        match h {
            Headline::Accuracy => self.accuracy,
            Headline::F1 => self.f1,
            Headline::Matthews => self.matthews,
            Headline::Spearman => self.spearman,
        }
    }

    fn fields(&self) -> [Option<f64>; 4] {
        [self.accuracy, self.f1, self.matthews, self.spearman]
    }

    fn from_fields(f: [Option<f64>; 4]) -> Self {
        Self { accuracy: f[0], f1: f[1], matthews: f[2], spearman: f[3] }
    }

    /// Field-wise mean and sample standard deviation over runs.
    pub fn aggregate(runs: &[Metrics]) -> (Metrics, Metrics) {
        let mut mean = [None; 4];
        let mut std = [None; 4];
        for i in 0..4 {
            let vals: Option<Vec<f64>> = runs.iter().map(|r| r.fields()[i]).collect();
            if let Some(vals) = vals.filter(|v| !v.is_empty()) {
                let (m, s) = mean_std(&vals);
                mean[i] = Some(m);
                std[i] = Some(s);
            }
        }
        (Self::from_fields(mean), Self::from_fields(std))
    }
}
