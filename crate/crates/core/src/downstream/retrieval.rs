//! Masked-event retrieval: can the contextualizer's output at a masked
//! position pick the true event out of a pool of distractors?

use std::collections::HashSet;

use rand::seq::index::sample;

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::nn::TxE;
use crate::pretrain::{sample_mask_uniform, window_tokens, MaskPlan};
use crate::rng::rng_from_seed;
use crate::tensor::{dot, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalConfig {
    /// Candidates per query, the true event included.
    pub pool_size: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            pool_size: 128,
            alpha: 0.6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub top1: f64,
    pub n_queries: usize,
    pub pool_size: usize,
}

impl RetrievalResult {
    pub fn chance(&self) -> f64 {
        1.0 / self.pool_size as f64
    }

    /// Binomial standard error of the hit rate under pure chance.
    pub fn chance_std(&self) -> f64 {
        let p = self.chance();
        (p * (1.0 - p) / self.n_queries as f64).sqrt()
    }
}

/// Indices of the first occurrence of each distinct row.
fn distinct_rows(t: &Tensor) -> Vec<usize> {
    let mut seen = HashSet::with_capacity(t.rows());
    (0..t.rows())
        .filter(|&r| seen.insert(t.row(r).iter().map(|x| x.to_bits()).collect::<Vec<u32>>()))
        .collect()
}

/// Evaluates over non-overlapping windows of every movie, one random mask
/// per window. Each masked position is a query; its pool is the true
/// target plus `pool_size - 1` distinct other targets from the corpus.
/// Ties with the true target earn fractional credit.
pub fn masked_retrieval_eval(corpus: &Corpus, targets: &Tensor, txe: &TxE, cfg: &RetrievalConfig) -> Result<RetrievalResult> {
    if cfg.pool_size < 2 {
        return Err(Error::InvalidArgument(format!("retrieval pool must hold >= 2 candidates, got {}", cfg.pool_size)));
    }
    let n = txe.config.seq_len;
    let d = txe.config.d_model;
    let distinct = distinct_rows(targets);
    if distinct.len() < cfg.pool_size {
        return Err(Error::InvalidArgument(format!(
            "only {} distinct targets for a pool of {}",
            distinct.len(),
            cfg.pool_size
        )));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let windows: Vec<(usize, usize)> = corpus
        .sequences
        .iter()
        .enumerate()
        .flat_map(|(m, s)| (0..s.events.len() / n).map(move |k| (m, k * n)))
        .collect();
    if windows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let offsets = corpus.offsets();
    let plans: Vec<Option<MaskPlan>> = windows
        .iter()
        .map(|_| sample_mask_uniform(n, cfg.alpha, &mut rng).map(Some))
        .collect::<Result<_>>()?;
    let mut score = 0.0;
    let mut queries = 0usize;
    const CHUNK: usize = 256;
    for (wc, pc) in windows.chunks(CHUNK).zip(plans.chunks(CHUNK)) {
        let tokens = window_tokens(targets, &offsets, wc, n)?;
        let out = txe.forward_windows(&tokens, pc)?;
        for (w, (&(m, s), plan)) in wc.iter().zip(pc).enumerate() {
            let plan = plan.expect("every window is masked");
            for pos in plan.positions() {
                let row = w * n + pos - 1;
                let v_hat = &out.data()[row * d..(row + 1) * d];
                let target_idx = offsets[m] + s + pos - 1;
                let truth = targets.row(target_idx);
                let truth_score = dot(v_hat, truth);
                let mut higher = 0usize;
                let mut ties = 0usize;
                let mut drawn = 0usize;
                for k in sample(&mut rng, distinct.len(), cfg.pool_size).iter() {
                    if drawn == cfg.pool_size - 1 {
                        break;
                    }
                    let cand = targets.row(distinct[k]);
                    if cand == truth {
                        continue;
                    }
                    drawn += 1;
                    let c = dot(v_hat, cand);
                    if c > truth_score {
                        higher += 1;
                    } else if c == truth_score {
                        ties += 1;
                    }
                }
                if higher == 0 {
                    score += 1.0 / (ties + 1) as f64;
                }
                queries += 1;
            }
        }
    }
    Ok(RetrievalResult {
        top1: score / queries as f64,
        n_queries: queries,
        pool_size: cfg.pool_size,
    })
}
