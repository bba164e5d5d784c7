//! Linear probes and end-to-end relation training.

use rand::seq::SliceRandom;

use crate::autograd::Tape;
use crate::data::{Corpus, Relation, RelationTriplet};
use crate::downstream::features::context_windows;
use crate::error::{Error, Result};
use crate::nn::params::{Linear, ParamStore};
use crate::nn::{Mode, SgdMomentum, TxE};
use crate::pretrain::window_tokens;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 2.0,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "probe: bad settings batch={} lr={} momentum={}",
                self.batch_size, self.lr, self.momentum
            )));
        }
        Ok(())
    }
}

/// Affine softmax classifier.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub params: ParamStore<f32>,
    linear: Linear,
    pub n_classes: usize,
}

impl LinearProbe {
    pub fn init(dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut params = ParamStore::new();
        let linear = Linear::new(&mut params, "probe", dim, n_classes, &mut rng);
        Self {
            params,
            linear,
            n_classes,
        }
    }

    pub fn dim(&self) -> usize {
        self.params.get(self.linear.weight).rows()
    }

    pub fn linear(&self) -> Linear {
        self.linear
    }

    pub fn scores(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(features.clone());
        let out = self.linear.forward(&mut tape, &b, x)?;
        Ok(tape.value(out).clone())
    }
}

fn check_labels(labels: &[usize], n_classes: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("probe", &[rows], &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {n_classes} classes")));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InvalidArgument("training labels contain a single class".into()));
    }
    Ok(())
}

/// Fits a linear probe on frozen features with minibatch SGD.
pub fn train_linear_probe(features: &Tensor, labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    check_labels(labels, n_classes, features.rows())?;
    let d = features.cols();
    let mut probe = LinearProbe::init(d, n_classes, derive_seed(cfg.seed, "probe-init"));
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum).with_weight_decay(cfg.weight_decay);
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * d);
            for &i in batch {
                x.extend_from_slice(features.row(i));
            }
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let b = probe.params.bind(&mut tape, true);
            let xv = tape.constant(Tensor::new(vec![batch.len(), d], x)?);
            let logits = probe.linear.forward(&mut tape, &b, xv)?;
            let loss = tape.cross_entropy(logits, &y)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Divergence { step: epoch, value });
            }
            let grads = tape.backward(loss)?;
            let g = probe.params.collect_grads(&b, &grads);
            opt.step(&mut probe.params, &g)?;
        }
    }
    Ok(probe)
}

/// Relation head trained jointly with a contextualizer on raw backbone
/// targets. `txe` is updated in place; the probe reads concatenated,
/// normalized outputs of the two events.
pub fn train_relation_end_to_end(
    corpus: &Corpus,
    targets: &Tensor,
    txe: &mut TxE,
    cfg: &ProbeConfig,
    txe_lr: f64,
) -> Result<LinearProbe> {
    cfg.validate()?;
    let triplets = &corpus.triplets;
    let labels: Vec<usize> = triplets.iter().map(|t| t.relation.index()).collect();
    check_labels(&labels, Relation::ALL.len(), triplets.len())?;
    let n = txe.config.seq_len;
    let d = txe.config.d_model;
    let ctx = context_windows(corpus, n)?;
    let offsets = corpus.offsets();
    let mut probe = LinearProbe::init(2 * d, Relation::ALL.len(), derive_seed(cfg.seed, "probe-init"));
    let mut opt_p = SgdMomentum::new(cfg.lr, cfg.momentum).with_weight_decay(cfg.weight_decay);
    let mut opt_t = SgdMomentum::new(txe_lr, cfg.momentum);
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let bt: Vec<RelationTriplet> = batch.iter().map(|&i| triplets[i]).collect();
            let mut windows = Vec::with_capacity(2 * bt.len());
            let mut rows = Vec::with_capacity(2 * bt.len());
            for t in &bt {
                for idx in [t.a_idx, t.b_idx] {
                    let (m, s, r) = ctx[idx as usize];
                    rows.push(windows.len() * n + r);
                    windows.push((m, s));
                }
            }
            let tokens = window_tokens(targets, &offsets, &windows, n)?;
            let y: Vec<usize> = bt.iter().map(|t| t.relation.index()).collect();
            let mut tape = Tape::new();
            let tb = txe.params.bind(&mut tape, true);
            let pb = probe.params.bind(&mut tape, true);
            let tok = tape.constant(tokens);
            let out = txe.forward(&mut tape, &tb, tok, None, Mode::Train(&mut rng))?;
            let a_rows: Vec<usize> = rows.iter().step_by(2).copied().collect();
            let b_rows: Vec<usize> = rows.iter().skip(1).step_by(2).copied().collect();
            let fa = tape.gather_rows(out, &a_rows)?;
            let fa = tape.l2_normalize(fa)?;
            let fb = tape.gather_rows(out, &b_rows)?;
            let fb = tape.l2_normalize(fb)?;
            let x = tape.concat_cols(&[fa, fb])?;
            let logits = probe.linear.forward(&mut tape, &pb, x)?;
            let loss = tape.cross_entropy(logits, &y)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Divergence { step: epoch, value });
            }
            let grads = tape.backward(loss)?;
            let gt = txe.params.collect_grads(&tb, &grads);
            let gp = probe.params.collect_grads(&pb, &grads);
            opt_t.step(&mut txe.params, &gt)?;
            opt_p.step(&mut probe.params, &gp)?;
        }
    }
    Ok(probe)
}
