//! Classification metrics over score matrices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Indices of the `k` largest scores; equal scores rank the lower index first.
pub fn top_k(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check(scores: &Tensor, labels: &[usize]) -> Result<()> {
    if scores.rows() != labels.len() {
        return Err(Error::shape("metrics", scores.shape(), &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= scores.cols()) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {} classes", scores.cols())));
    }
    Ok(())
}

fn hits(scores: &Tensor, labels: &[usize], k: usize) -> Vec<bool> {
    (0..labels.len())
        .map(|i| top_k(scores.row(i), k).contains(&labels[i]))
        .collect()
}

/// Fraction of samples whose label is among the top `k` scores.
pub fn accuracy_at_k(scores: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    check(scores, labels)?;
    let h = hits(scores, labels, k);
    Ok(h.iter().filter(|&&x| x).count() as f64 / h.len() as f64)
}

/// Per-class hit rate at `k`; `None` for classes with no samples.
pub fn per_class_hit_rate(scores: &Tensor, labels: &[usize], k: usize) -> Result<Vec<Option<f64>>> {
    check(scores, labels)?;
    let h = hits(scores, labels, k);
    let c = scores.cols();
    let mut tot = vec![0usize; c];
    let mut ok = vec![0usize; c];
    for (&l, &hit) in labels.iter().zip(&h) {
        tot[l] += 1;
        ok[l] += hit as usize;
    }
    Ok((0..c)
        .map(|j| (tot[j] > 0).then(|| ok[j] as f64 / tot[j] as f64))
        .collect())
}

fn mean_present(rates: &[Option<f64>], what: &str) -> f64 {
    let absent: Vec<usize> = rates
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(i, _)| i)
        .collect();
    if !absent.is_empty() {
        log::warn!("{what}: classes {absent:?} have no evaluation samples and are excluded");
    }
    let present: Vec<f64> = rates.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len() as f64
}

/// Class-averaged recall at `k` over classes present in `labels`.
pub fn macro_recall_at_k(scores: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    Ok(mean_present(&per_class_hit_rate(scores, labels, k)?, "recall"))
}

/// Unweighted mean of per-class top-1 accuracy over present classes.
pub fn mean_class_accuracy(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(mean_present(&per_class_hit_rate(scores, labels, 1)?, "mean accuracy"))
}

/// A named set of metric values plus the run identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub values: BTreeMap<String, f64>,
    pub n_samples: usize,
    pub seed: u64,
    pub config_hash: u64,
}

impl MetricsReport {
    pub fn new(task: impl Into<String>, n_samples: usize) -> Self {
        Self {
            task: task.into(),
            values: BTreeMap::new(),
            n_samples,
            seed: 0,
            config_hash: 0,
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.values.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }
}
