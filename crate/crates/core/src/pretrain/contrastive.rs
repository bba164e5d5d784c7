//! Clip-level contrastive pretraining of the backbone: two augmented
//! views per clip, a projection head, and a symmetric InfoNCE objective.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::nn::params::{Linear, ParamStore};
use crate::nn::{Backbone, BackboneConfig, SgdMomentum};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentStrengths {
    /// Smallest kept fraction of the clip for the temporal crop; `1.0`
    /// disables cropping.
    pub crop_min_ratio: f64,
    /// Crops never keep fewer than this many timesteps.
    pub min_window: usize,
    pub jitter_sigma: f64,
    pub channel_drop: f64,
}

impl Default for AugmentStrengths {
    fn default() -> Self {
        Self {
            crop_min_ratio: 0.5,
            min_window: 2,
            jitter_sigma: 0.1,
            channel_drop: 0.1,
        }
    }
}

impl AugmentStrengths {
    pub fn none() -> Self {
        Self {
            crop_min_ratio: 1.0,
            min_window: 1,
            jitter_sigma: 0.0,
            channel_drop: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_min_ratio > 0.0 && self.crop_min_ratio <= 1.0) {
            return Err(Error::Config(format!("crop ratio {} outside (0, 1]", self.crop_min_ratio)));
        }
        if self.min_window == 0 {
            return Err(Error::Config("minimum crop window must be positive".into()));
        }
        if self.jitter_sigma < 0.0 || !(0.0..1.0).contains(&self.channel_drop) {
            return Err(Error::Config(format!(
                "jitter {} / channel drop {} out of range",
                self.jitter_sigma, self.channel_drop
            )));
        }
        Ok(())
    }
}

/// One random view: crop then nearest-neighbour resample back to `T`,
/// additive Gaussian jitter, and whole-channel dropout.
pub fn augment_view(clip: &Tensor<f32>, s: &AugmentStrengths, rng: &mut Rng) -> Result<Tensor<f32>> {
    s.validate()?;
    let (t, d) = (clip.rows(), clip.cols());
    if t < s.min_window {
        return Err(Error::InvalidArgument(format!(
            "clip of {t} timesteps is shorter than the crop window {}",
            s.min_window
        )));
    }
    let ratio = if s.crop_min_ratio < 1.0 {
        rng.random_range(s.crop_min_ratio..=1.0)
    } else {
        1.0
    };
    let len = ((ratio * t as f64).round() as usize).clamp(s.min_window, t);
    let start = if len < t { rng.random_range(0..=t - len) } else { 0 };
    let dropped: Vec<bool> = (0..d)
        .map(|_| s.channel_drop > 0.0 && rng.random::<f64>() < s.channel_drop)
        .collect();
    let noise = Normal::new(0.0, s.jitter_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = Vec::with_capacity(t * d);
    for i in 0..t {
        let src = clip.row(start + i * len / t);
        for (c, &x) in src.iter().enumerate() {
            let mut v = x as f64;
            if s.jitter_sigma > 0.0 {
                v += noise.sample(rng);
            }
            out.push(if dropped[c] { 0.0 } else { v as f32 });
        }
    }
    Tensor::new(vec![t, d], out)
}

/// Two independent views of the same clip.
pub fn augment_views(
    clip: &Tensor<f32>,
    s: &AugmentStrengths,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    Ok((augment_view(clip, s, rng)?, augment_view(clip, s, rng)?))
}

/// Symmetric InfoNCE over a batch of paired unit-norm rows: row `i` of
/// `z_a` must pick row `i` of `z_b` among all rows, and vice versa.
pub fn info_nce<F: Scalar>(tape: &mut Tape<F>, z_a: Var, z_b: Var, tau: f64) -> Result<Var> {
    let (a, b) = (tape.value(z_a), tape.value(z_b));
    if a.shape() != b.shape() {
        return Err(Error::shape("info_nce", a.shape(), b.shape()));
    }
    let batch = a.rows();
    if batch < 2 {
        return Err(Error::InvalidArgument(format!("InfoNCE needs a batch of at least 2, got {batch}")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    for t in [a, b] {
        for r in 0..t.rows() {
            let norm = t.row(r).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(Error::NotUnitNorm { row: r, norm });
            }
        }
    }
    let bt = tape.transpose(z_b);
    let sim = tape.matmul(z_a, bt)?;
    let logits = tape.scale(sim, F::from_f64(1.0 / tau));
    let diag: Vec<usize> = (0..batch).collect();
    let ab = tape.cross_entropy(logits, &diag)?;
    let logits_t = tape.transpose(logits);
    let ba = tape.cross_entropy(logits_t, &diag)?;
    let total = tape.add(ab, ba)?;
    Ok(tape.scale(total, F::from_f64(0.5)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub proj_dim: usize,
    pub augment: AugmentStrengths,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            batch_size: 32,
            steps: 2000,
            lr: 0.05,
            momentum: 0.9,
            proj_dim: 64,
            augment: AugmentStrengths::default(),
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("contrastive batch size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.tau > 0.0) || !(self.lr > 0.0) || self.proj_dim == 0 {
            return Err(Error::Config("contrastive tau, lr and proj_dim must be positive".into()));
        }
        Ok(())
    }
}

struct ProjectionHead {
    params: ParamStore<f32>,
    hidden: Linear,
    out: Linear,
}

impl ProjectionHead {
    fn new(d_model: usize, proj_dim: usize, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        let hidden = Linear::new(&mut params, "proj.hidden", d_model, d_model, rng);
        let out = Linear::new(&mut params, "proj.out", d_model, proj_dim, rng);
        Self { params, hidden, out }
    }
}

/// Trains a backbone from scratch with instance discrimination over clips.
/// The projection head only exists during training.
pub fn pretrain_backbone(
    corpus: &Corpus,
    config: &BackboneConfig,
    cfg: &ContrastiveConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<Backbone> {
    cfg.validate()?;
    let n = corpus.n_events();
    if n < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "corpus has {n} events, fewer than the batch size {}",
            cfg.batch_size
        )));
    }
    if corpus.d_in != config.d_in || corpus.window != config.window {
        return Err(Error::shape(
            "pretrain_backbone",
            &[corpus.window, corpus.d_in],
            &[config.window, config.d_in],
        ));
    }
    let mut backbone = Backbone::init(config.clone(), derive_seed(cfg.seed, "backbone-init"))?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut head = ProjectionHead::new(config.d_model, cfg.proj_dim, &mut rng);
    let mut opt_b = SgdMomentum::new(cfg.lr, cfg.momentum);
    let mut opt_h = SgdMomentum::new(cfg.lr, cfg.momentum);
    let clips: Vec<&Tensor<f32>> = corpus.events().map(|e| &e.clip).collect();
    let (t, d_in) = (config.window, config.d_in);

    for step in 0..cfg.steps {
        let picks = sample(&mut rng, n, cfg.batch_size);
        let mut va = Vec::with_capacity(cfg.batch_size * t * d_in);
        let mut vb = Vec::with_capacity(cfg.batch_size * t * d_in);
        for i in picks.iter() {
            let (a, b) = augment_views(clips[i], &cfg.augment, &mut rng)?;
            va.extend_from_slice(a.data());
            vb.extend_from_slice(b.data());
        }
        let rows = cfg.batch_size * t;
        let mut tape = Tape::new();
        let bb = backbone.params.bind(&mut tape, true);
        let hb = head.params.bind(&mut tape, true);
        let project = |tape: &mut Tape<f32>, data: Vec<f32>| -> Result<Var> {
            let x = tape.constant(Tensor::new(vec![rows, d_in], data)?);
            let h = backbone.forward(tape, &bb, x)?;
            let h = head.hidden.forward(tape, &hb, h)?;
            let h = tape.gelu(h);
            let z = head.out.forward(tape, &hb, h)?;
            tape.l2_normalize(z)
        };
        let za = project(&mut tape, va)?;
        let zb = project(&mut tape, vb)?;
        let loss = info_nce(&mut tape, za, zb, cfg.tau)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { step, value });
        }
        let grads = tape.backward(loss)?;
        let gb = backbone.params.collect_grads(&bb, &grads);
        let gh = head.params.collect_grads(&hb, &grads);
        opt_b.step(&mut backbone.params, &gb)?;
        opt_h.step(&mut head.params, &gh)?;
        if step % 100 == 0 {
            log::debug!("pretrain_backbone step {step} loss {value:.4}");
        }
        on_step(step, value);
    }
    Ok(backbone)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip() -> Tensor<f32> {
        let data = (0..8 * 4).map(|i| i as f32 * 0.1).collect();
        Tensor::new(vec![8, 4], data).unwrap()
    }

    #[test]
    fn zero_strength_views_are_identity() {
        let mut rng = rng_from_seed(1);
        let (a, b) = augment_views(&clip(), &AugmentStrengths::none(), &mut rng).unwrap();
        assert_eq!(a, clip());
        assert_eq!(b, clip());
    }

    #[test]
    fn jitter_has_requested_variance() {
        let mut rng = rng_from_seed(2);
        let s = AugmentStrengths {
            jitter_sigma: 0.1,
            ..AugmentStrengths::none()
        };
        let c = clip();
        let mut acc = 0.0;
        let mut count = 0.0;
        for _ in 0..200 {
            let v = augment_view(&c, &s, &mut rng).unwrap();
            for (x, y) in v.data().iter().zip(c.data()) {
                acc += ((x - y) as f64).powi(2);
                count += 1.0;
            }
        }
        let msq = acc / count;
        assert!((msq - 0.01).abs() < 0.001, "{msq}");
    }

    #[test]
    fn crop_resamples_to_full_length() {
        let mut rng = rng_from_seed(3);
        let s = AugmentStrengths {
            crop_min_ratio: 0.25,
            ..AugmentStrengths::none()
        };
        for _ in 0..50 {
            let v = augment_view(&clip(), &s, &mut rng).unwrap();
            assert_eq!(v.shape(), &[8, 4]);
            // rows are copies of source rows, in non-decreasing order
            let firsts: Vec<f32> = (0..8).map(|r| v.row(r)[0]).collect();
            assert!(firsts.windows(2).all(|w| w[0] <= w[1]));
        }
        let short = Tensor::<f32>::zeros(&[1, 4]);
        let s2 = AugmentStrengths::default();
        assert!(augment_view(&short, &s2, &mut rng).is_err());
    }

    #[test]
    fn info_nce_reference_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::eye(2));
        let l = info_nce(&mut tape, z, z, 0.1).unwrap();
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-15);

        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_f64_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let l = info_nce(&mut tape, z, z, 0.1).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_f64_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(info_nce(&mut tape, z, z, 0.1).is_err());
    }
}
