use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kt::PredictionRecord;

/// Accuracy at threshold 0.5; a prediction of exactly 0.5 counts as 0.
pub fn accuracy(labels: &[u8], preds: &[f64]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().zip(preds).filter(|(&y, &p)| u8::from(p > 0.5) == y).count();
    hits as f64 / labels.len() as f64
}

/// F1 with y = 1 as the positive class, same threshold as [`accuracy`].
pub fn f1(labels: &[u8], preds: &[f64]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&y, &p) in labels.iter().zip(preds) {
        match (y == 1, p > 0.5) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// ROC AUC from average ranks (ties share their mean rank, i.e. count 0.5).
/// `None` when only one class is present.
pub fn auc(labels: &[u8], preds: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut k = i;
        while k + 1 < order.len() && preds[order[k + 1]] == preds[order[i]] {
            k += 1;
        }
        // Ranks are 1-based; doubled to stay in integers.
        let doubled_rank = (i + 1 + k + 1) as u64;
        let pos_in_block = order[i..=k].iter().filter(|&&idx| labels[idx] == 1).count() as u64;
        rank_sum_pos += (doubled_rank * pos_in_block) as f64 / 2.0;
        i = k + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc: f64,
    pub auc: Option<f64>,
    pub f1: f64,
    pub n_scored: usize,
}

fn scored(records: &[PredictionRecord]) -> (Vec<u8>, Vec<f64>) {
    records.iter().filter(|r| !r.excluded).map(|r| (r.y, r.y_hat)).unzip()
}

/// Metrics over every record not flagged as excluded.
pub fn compute_metrics(records: &[PredictionRecord]) -> Result<Scores> {
    let (labels, preds) = scored(records);
    if labels.is_empty() {
        return Err(Error::invalid("no scored records"));
    }
    Ok(Scores {
        acc: accuracy(&labels, &preds),
        auc: auc(&labels, &preds),
        f1: f1(&labels, &preds),
        n_scored: labels.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: MeanStd,
    pub auc: Option<MeanStd>,
    pub f1: MeanStd,
    pub n_scored: usize,
    pub folds: Vec<Scores>,
    /// Folds left out of the AUC mean because they held a single class.
    pub undefined_auc_folds: usize,
}

impl MetricReport {
    pub fn from_folds(folds: Vec<Scores>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::invalid("no folds to aggregate"));
        }
        let accs: Vec<f64> = folds.iter().map(|f| f.acc).collect();
        let f1s: Vec<f64> = folds.iter().map(|f| f.f1).collect();
        let aucs: Vec<f64> = folds.iter().filter_map(|f| f.auc).collect();
        let undefined = folds.len() - aucs.len();
        if undefined > 0 {
            log::warn!("{undefined} fold(s) have a single class; AUC averaged over the rest");
        }
        Ok(MetricReport {
            acc: MeanStd::of(&accs).unwrap(),
            auc: MeanStd::of(&aucs),
            f1: MeanStd::of(&f1s).unwrap(),
            n_scored: folds.iter().map(|f| f.n_scored).sum(),
            folds,
            undefined_auc_folds: undefined,
        })
    }

    pub fn single(scores: Scores) -> Self {
        Self::from_folds(vec![scores]).expect("one fold")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |m: &MeanStd| {
            if self.folds.len() > 1 {
                format!("{:.2} ± {:.2}", m.mean * 100.0, m.std * 100.0)
            } else {
                format!("{:.2}", m.mean * 100.0)
            }
        };
        let auc = self.auc.as_ref().map(show).unwrap_or_else(|| "undefined".into());
        write!(f, "Acc {} | AUC {} | F1 {} | n = {}", show(&self.acc), auc, show(&self.f1), self.n_scored)
    }
}

/// Rate of correct labels among training records.
pub fn majority_rate(train: &[PredictionRecord]) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::invalid("majority baseline needs training records"));
    }
    Ok(train.iter().filter(|r| r.y == 1).count() as f64 / train.len() as f64)
}

/// Scores the constant prediction ŷ = training correct-rate on `test`.
pub fn majority_baseline(train: &[PredictionRecord], test: &[PredictionRecord]) -> Result<Scores> {
    let rate = majority_rate(train)?;
    let constant: Vec<PredictionRecord> = test
        .iter()
        .map(|r| PredictionRecord {
            y_hat: rate,
            z_hats: vec![rate; r.kcs.len()],
            ..r.clone()
        })
        .collect();
    compute_metrics(&constant)
}
