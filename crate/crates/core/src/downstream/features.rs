//! Per-event feature extraction for probes.

use crate::data::{Corpus, RelationTriplet};
use crate::error::{Error, Result};
use crate::nn::TxE;
use crate::pretrain::window_tokens;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Backbone,
    Contextualized,
}

impl FeatureSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(FeatureSource::Backbone),
            "txe" | "contextualized" => Ok(FeatureSource::Contextualized),
            _ => Err(Error::Config(format!("unknown feature source {s:?}"))),
        }
    }
}

/// `(movie, window start, row in window)` for every event: the window of
/// `n` events centred on the event, shifted to stay inside the movie.
pub fn context_windows(corpus: &Corpus, n: usize) -> Result<Vec<(usize, usize, usize)>> {
    let mut out = Vec::with_capacity(corpus.n_events());
    for (m, seq) in corpus.sequences.iter().enumerate() {
        let len = seq.events.len();
        if len < n {
            return Err(Error::InvalidArgument(format!(
                "movie {} has {len} events, fewer than the window length {n}",
                seq.movie_id
            )));
        }
        for p in 0..len {
            let start = p.saturating_sub(n / 2).min(len - n);
            out.push((m, start, p - start));
        }
    }
    Ok(out)
}

fn normalize_rows(t: &mut Tensor) -> Result<()> {
    let d = t.cols();
    for (r, row) in t.data_mut().chunks_mut(d).enumerate() {
        let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroNorm { row: r, norm });
        }
        row.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
    }
    Ok(())
}

/// Unmasked contextualizer outputs, L2-normalized, one row per event.
pub fn contextual_features(corpus: &Corpus, targets: &Tensor, txe: &TxE) -> Result<Tensor> {
    let n = txe.config.seq_len;
    let d = txe.config.d_model;
    let ctx = context_windows(corpus, n)?;
    let offsets = corpus.offsets();
    let windows = corpus.windows(n);
    let mut out_rows = vec![0f32; ctx.len() * d];
    const CHUNK: usize = 256;
    let mut win_out = std::collections::HashMap::with_capacity(windows.len());
    for chunk in windows.chunks(CHUNK) {
        let tokens = window_tokens(targets, &offsets, chunk, n)?;
        let out = txe.forward_windows(&tokens, &vec![None; chunk.len()])?;
        for (i, w) in chunk.iter().enumerate() {
            win_out.insert(*w, out.data()[i * n * d..(i + 1) * n * d].to_vec());
        }
    }
    for (e, &(m, s, r)) in ctx.iter().enumerate() {
        let w = &win_out[&(m, s)];
        out_rows[e * d..(e + 1) * d].copy_from_slice(&w[r * d..(r + 1) * d]);
    }
    let mut t = Tensor::new(vec![ctx.len(), d], out_rows)?;
    normalize_rows(&mut t)?;
    Ok(t)
}

/// `[feat(A), feat(B)]` rows and relation labels for each triplet.
pub fn pair_features(features: &Tensor, triplets: &[RelationTriplet]) -> Result<(Tensor, Vec<usize>)> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("no relation triplets".into()));
    }
    let d = features.cols();
    let mut data = Vec::with_capacity(triplets.len() * 2 * d);
    for t in triplets {
        for idx in [t.a_idx, t.b_idx] {
            let idx = idx as usize;
            if idx >= features.rows() {
                return Err(Error::InvalidArgument(format!("event index {idx} out of range")));
            }
            data.extend_from_slice(features.row(idx));
        }
    }
    let labels = triplets.iter().map(|t| t.relation.index()).collect();
    Ok((Tensor::new(vec![triplets.len(), 2 * d], data)?, labels))
}
