//! Mask-prediction pretraining loop for the contextualizer.

use rand::Rng as _;

use crate::autograd::Tape;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::nn::{Backbone, Mode, SgdMomentum, TxE, TxEConfig};
use crate::pretrain::mask::{
    mask_pred_l2_loss, mask_pred_loss, sample_mask_max_discrepancy, sample_mask_uniform, DistractorQueue, MaskPlan,
};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSampler {
    Uniform,
    MaxDiscrepancy,
}

impl MaskSampler {
    pub fn name(self) -> &'static str {
        match self {
            MaskSampler::Uniform => "uniform",
            MaskSampler::MaxDiscrepancy => "max_discrepancy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(MaskSampler::Uniform),
            "max_discrepancy" | "max-discrepancy" => Ok(MaskSampler::MaxDiscrepancy),
            _ => Err(Error::Config(format!("unknown mask sampler {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskLoss {
    Contrastive,
    L2,
}

impl MaskLoss {
    pub fn name(self) -> &'static str {
        match self {
            MaskLoss::Contrastive => "contrastive",
            MaskLoss::L2 => "l2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(MaskLoss::Contrastive),
            "l2" => Ok(MaskLoss::L2),
            _ => Err(Error::Config(format!("unknown mask loss {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPretrainConfig {
    /// Maximum masked fraction of a window.
    pub alpha: f64,
    pub tau: f64,
    pub queue_size: usize,
    pub sampler: MaskSampler,
    pub loss: MaskLoss,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for MaskPretrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            tau: 0.1,
            queue_size: 512,
            sampler: MaskSampler::Uniform,
            loss: MaskLoss::Contrastive,
            steps: 2000,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl MaskPretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("mask alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("bad optimizer settings lr={} momentum={}", self.lr, self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub queue_fill: usize,
    /// Count of windows per mask size `1..=N` in this step.
    pub mask_sizes: Vec<usize>,
}

/// L2-normalized backbone embeddings of every event, in corpus order.
pub fn event_targets(corpus: &Corpus, backbone: &Backbone) -> Result<Tensor> {
    let n = corpus.n_events();
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let t = corpus.window;
    let d = backbone.config.d_model;
    let clips = corpus.stacked_clips();
    let mut out = Vec::with_capacity(n * d);
    const CHUNK: usize = 512;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let rows = clips.data()[start * t * corpus.d_in..end * t * corpus.d_in].to_vec();
        let emb = backbone.encode_batch(&Tensor::new(vec![(end - start) * t, corpus.d_in], rows)?)?;
        for r in 0..emb.rows() {
            let row = emb.row(r);
            let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::ZeroNorm { row: start + r, norm });
            }
            out.extend(row.iter().map(|&x| (x as f64 / norm) as f32));
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Stacks the target rows of the given `(movie, start)` windows.
pub fn window_tokens(targets: &Tensor, offsets: &[usize], windows: &[(usize, usize)], n: usize) -> Result<Tensor> {
    let d = targets.cols();
    let mut data = Vec::with_capacity(windows.len() * n * d);
    for &(m, s) in windows {
        let first = offsets[m] + s;
        data.extend_from_slice(&targets.data()[first * d..(first + n) * d]);
    }
    Tensor::new(vec![windows.len() * n, d], data)
}

/// Pretrains a fresh contextualizer on frozen backbone targets.
pub fn pretrain_txe(
    corpus: &Corpus,
    backbone: &Backbone,
    txe_config: &TxEConfig,
    cfg: &MaskPretrainConfig,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<TxE> {
    cfg.validate()?;
    let txe = TxE::init(txe_config.clone(), crate::rng::derive_seed(cfg.seed, "txe-init"))?;
    let targets = event_targets(corpus, backbone)?;
    continue_pretrain_txe(txe, &targets, corpus, cfg, on_step)
}

/// Runs the training loop from an existing contextualizer.
pub fn continue_pretrain_txe(
    mut txe: TxE,
    targets: &Tensor,
    corpus: &Corpus,
    cfg: &MaskPretrainConfig,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<TxE> {
    cfg.validate()?;
    let n = txe.config.seq_len;
    let d = txe.config.d_model;
    if targets.cols() != d || targets.rows() != corpus.n_events() {
        return Err(Error::shape("pretrain_txe", targets.shape(), &[corpus.n_events(), d]));
    }
    let windows = corpus.windows(n);
    if windows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let offsets = corpus.offsets();
    let mut rng = rng_from_seed(cfg.seed);
    let mut queue = DistractorQueue::new(cfg.queue_size, d);
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum)
        .with_weight_decay(cfg.weight_decay)
        .with_clip_norm(cfg.clip_norm);

    for step in 0..cfg.steps {
        let batch: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| windows[rng.random_range(0..windows.len())])
            .collect();
        let tokens = window_tokens(targets, &offsets, &batch, n)?;
        let mut plans: Vec<Option<MaskPlan>> = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let plan = match cfg.sampler {
                MaskSampler::Uniform => sample_mask_uniform(n, cfg.alpha, &mut rng)?,
                MaskSampler::MaxDiscrepancy => {
                    let w = Tensor::new(vec![n, d], tokens.data()[b * n * d..(b + 1) * n * d].to_vec())?;
                    sample_mask_max_discrepancy(&w, &txe, n, cfg.alpha, &mut rng)?
                }
            };
            plans.push(Some(plan));
        }
        let mask = txe.mask_rows_for(&plans)?;
        let masked: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();

        let mut tape = Tape::new();
        let bound = txe.params.bind(&mut tape, true);
        let tok = tape.constant(tokens.clone());
        let out = txe.forward(&mut tape, &bound, tok, Some(&mask), Mode::Train(&mut rng))?;
        let picked = tape.gather_rows(out, &masked)?;
        let v_hat = tape.l2_normalize(picked)?;
        let tgt_rows = {
            let mut data = Vec::with_capacity(masked.len() * d);
            for &r in &masked {
                data.extend_from_slice(tokens.row(r));
            }
            Tensor::new(vec![masked.len(), d], data)?
        };
        let tgt = tape.constant(tgt_rows.clone());
        let loss = match cfg.loss {
            MaskLoss::Contrastive => mask_pred_loss(&mut tape, v_hat, tgt, &queue, cfg.tau)?,
            MaskLoss::L2 => mask_pred_l2_loss(&mut tape, v_hat, tgt)?,
        };
        let loss_value = tape.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Divergence {
                step,
                value: loss_value,
            });
        }
        let grads = tape.backward(loss)?;
        let g = txe.params.collect_grads(&bound, &grads);
        opt.step(&mut txe.params, &g)?;
        queue.push(&tgt_rows)?;

        let mut mask_sizes = vec![0; n];
        for p in plans.iter().flatten() {
            mask_sizes[p.size() - 1] += 1;
        }
        let m = StepMetrics {
            step,
            loss: loss_value,
            queue_fill: queue.len(),
            mask_sizes,
        };
        if step % 100 == 0 || step + 1 == cfg.steps {
            log::debug!("pretrain_txe step {step} loss {loss_value:.4} queue {}", queue.len());
        }
        on_step(&m);
    }
    Ok(txe)
}
