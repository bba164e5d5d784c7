//! Run configuration as flat `section.key = value` text.
//!
//! Every key has a typed default; files and `--set` overrides may only name
//! known keys. The resolved text (all keys, fixed order) is what gets hashed
//! and embedded in checkpoints.

use std::fmt::Write as _;

use crate::data::NarrativeConfig;
use crate::downstream::{ProbeConfig, RetrievalConfig};
use crate::error::{Error, Result};
use crate::nn::{BackboneConfig, TxEConfig};
use crate::pretrain::{AugmentStrengths, ContrastiveConfig, MaskLoss, MaskPretrainConfig, MaskSampler};
use crate::rng::{derive_seed, fnv1a64};

trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse_value(s: &str) -> Option<Self>;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn render(&self) -> String {
                format!("{self:?}")
            }
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
        }
    )*};
}
plain_value!(usize, u64, u32, f64);

impl ConfigValue for MaskSampler {
    fn render(&self) -> String {
        self.name().to_string()
    }
    fn parse_value(s: &str) -> Option<Self> {
        MaskSampler::parse(s).ok()
    }
}

impl ConfigValue for MaskLoss {
    fn render(&self) -> String {
        self.name().to_string()
    }
    fn parse_value(s: &str) -> Option<Self> {
        MaskLoss::parse(s).ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: NarrativeConfig,
    pub eval_movies: usize,
    pub backbone: BackboneConfig,
    pub contrastive: ContrastiveConfig,
    pub txe: TxEConfig,
    pub mask: MaskPretrainConfig,
    /// Keep every `stride`-th event before contextualization.
    pub stride: usize,
    pub probe: ProbeConfig,
    /// Learning rate of the contextualizer when trained through a probe.
    pub probe_txe_lr: f64,
    /// Epochs of end-to-end contextualizer + head training.
    pub probe_e2e_epochs: usize,
    /// Independent label shuffles averaged into the chance control.
    pub probe_shuffle_repeats: usize,
    pub retrieval: RetrievalConfig,
}

macro_rules! config_fields {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        impl RunConfig {
            /// All keys in canonical order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, ConfigValue::render(&self.$($field).+))),*]
            }

            fn set_raw(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(raw).ok_or_else(|| {
                            Error::Config(format!("cannot parse {raw:?} for {key}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }
        }
    };
}

config_fields! {
    "run.seed" => seed,
    "data.n_movies" => data.n_movies,
    "data.eval_movies" => eval_movies,
    "data.seq_len" => data.seq_len,
    "data.n_scenes" => data.n_scenes,
    "data.n_verbs" => data.n_verbs,
    "data.d_in" => data.d_in,
    "data.window" => data.window,
    "data.noise_sigma" => data.noise_sigma,
    "data.suppression" => data.suppression,
    "data.suppressed_gain" => data.suppressed_gain,
    "data.decoy_gain" => data.decoy_gain,
    "data.stay_prob" => data.stay_prob,
    "data.advance_prob" => data.advance_prob,
    "data.scene_scale" => data.scene_scale,
    "data.drift_scale" => data.drift_scale,
    "data.drift_rho" => data.drift_rho,
    "data.verb_scale" => data.verb_scale,
    "data.verbs_per_scene" => data.verbs_per_scene,
    "data.verb_focus" => data.verb_focus,
    "data.triplets_per_movie" => data.triplets_per_movie,
    "data.label_noise" => data.label_noise,
    "data.stride_s" => data.stride_s,
    "backbone.hidden" => backbone.hidden,
    "backbone.d_model" => backbone.d_model,
    "contrastive.tau" => contrastive.tau,
    "contrastive.batch_size" => contrastive.batch_size,
    "contrastive.steps" => contrastive.steps,
    "contrastive.lr" => contrastive.lr,
    "contrastive.momentum" => contrastive.momentum,
    "contrastive.proj_dim" => contrastive.proj_dim,
    "contrastive.crop_min_ratio" => contrastive.augment.crop_min_ratio,
    "contrastive.min_window" => contrastive.augment.min_window,
    "contrastive.jitter_sigma" => contrastive.augment.jitter_sigma,
    "contrastive.channel_drop" => contrastive.augment.channel_drop,
    "txe.n_layers" => txe.n_layers,
    "txe.n_heads" => txe.n_heads,
    "txe.d_ff" => txe.d_ff,
    "txe.seq_len" => txe.seq_len,
    "txe.dropout" => txe.dropout,
    "txe.ln_eps" => txe.ln_eps,
    "mask.alpha" => mask.alpha,
    "mask.tau" => mask.tau,
    "mask.queue_size" => mask.queue_size,
    "mask.sampler" => mask.sampler,
    "mask.loss" => mask.loss,
    "mask.steps" => mask.steps,
    "mask.batch_size" => mask.batch_size,
    "mask.lr" => mask.lr,
    "mask.momentum" => mask.momentum,
    "mask.weight_decay" => mask.weight_decay,
    "mask.clip_norm" => mask.clip_norm,
    "mask.stride" => stride,
    "probe.epochs" => probe.epochs,
    "probe.batch_size" => probe.batch_size,
    "probe.lr" => probe.lr,
    "probe.momentum" => probe.momentum,
    "probe.weight_decay" => probe.weight_decay,
    "probe.txe_lr" => probe_txe_lr,
    "probe.e2e_epochs" => probe_e2e_epochs,
    "probe.shuffle_repeats" => probe_shuffle_repeats,
    "retrieval.pool_size" => retrieval.pool_size,
    "retrieval.alpha" => retrieval.alpha,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl RunConfig {
    /// Sizes that finish on one CPU core in minutes.
    pub fn desk_scale() -> Self {
        let mut cfg = Self {
            seed: 0,
            data: NarrativeConfig::default(),
            eval_movies: 200,
            backbone: BackboneConfig::default(),
            contrastive: ContrastiveConfig {
                augment: AugmentStrengths::default(),
                ..Default::default()
            },
            txe: TxEConfig::desk_scale(),
            mask: MaskPretrainConfig::default(),
            stride: 1,
            probe: ProbeConfig::default(),
            probe_txe_lr: 0.01,
            probe_e2e_epochs: 30,
            probe_shuffle_repeats: 10,
            retrieval: RetrievalConfig::default(),
        };
        cfg.sync();
        cfg
    }

    /// Model sizes of the original large-scale setup; far too slow here.
    pub fn full_scale() -> Self {
        let mut cfg = Self::desk_scale();
        cfg.txe = TxEConfig::full_scale();
        cfg.backbone.hidden = 1024;
        cfg.backbone.d_model = 1024;
        cfg.data.n_movies = 2000;
        cfg.mask.queue_size = 65536;
        cfg.mask.batch_size = 256;
        cfg.mask.steps = 100_000;
        cfg.contrastive.batch_size = 256;
        cfg.contrastive.steps = 50_000;
        cfg.contrastive.proj_dim = 128;
        cfg.sync();
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk-scale" | "desk" => Ok(Self::desk_scale()),
            "full-scale" | "full" => Ok(Self::full_scale()),
            _ => Err(Error::Config(format!("unknown preset {name:?}"))),
        }
    }

    /// Propagates shared dimensions and derives per-stage seeds.
    fn sync(&mut self) {
        self.backbone.d_in = self.data.d_in;
        self.backbone.window = self.data.window;
        self.txe.d_model = self.backbone.d_model;
        self.data.world_seed = derive_seed(self.seed, "world");
        self.data.seed = derive_seed(self.seed, "train-data");
        self.contrastive.seed = derive_seed(self.seed, "contrastive");
        self.mask.seed = derive_seed(self.seed, "mask");
        self.probe.seed = derive_seed(self.seed, "probe");
        self.retrieval.seed = derive_seed(self.seed, "retrieval");
    }

    /// Generator settings for the held-out corpus: same world, new samples.
    pub fn eval_data(&self) -> NarrativeConfig {
        NarrativeConfig {
            n_movies: self.eval_movies,
            seed: derive_seed(self.seed, "eval-data"),
            ..self.data.clone()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_raw(key.trim(), value.trim())?;
        self.sync();
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Applies every assignment in config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk_scale();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    /// Canonical text with every key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone.validate()?;
        self.contrastive.validate()?;
        self.txe.validate()?;
        self.mask.validate()?;
        self.probe.validate()?;
        if self.eval_movies == 0 {
            return Err(Error::Config("data.eval_movies must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("mask.stride must be >= 1".into()));
        }
        let kept = self.data.seq_len.div_ceil(self.stride);
        if kept < self.txe.seq_len {
            return Err(Error::Config(format!(
                "stride {} leaves {kept} events per movie, fewer than txe.seq_len {}",
                self.stride, self.txe.seq_len
            )));
        }
        if self.probe_shuffle_repeats == 0 {
            return Err(Error::Config("probe.shuffle_repeats must be >= 1".into()));
        }
        if self.retrieval.pool_size < 2 {
            return Err(Error::Config("retrieval.pool_size must be >= 2".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::desk_scale();
        cfg.set("mask.sampler", "max_discrepancy").unwrap();
        cfg.set("mask.tau", "0.07").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = RunConfig::desk_scale();
        assert!(cfg.set("mask.alhpa", "0.5").is_err());
        assert!(cfg.set("mask.alpha", "lots").is_err());
        assert!(RunConfig::parse("mask.alpha 0.5").is_err());
        assert!(RunConfig::parse("mask.alpha = 0").is_err());
    }

    #[test]
    fn seed_derives_stage_seeds() {
        let mut cfg = RunConfig::desk_scale();
        cfg.set("run.seed", "5").unwrap();
        assert_eq!(cfg.data.seed, derive_seed(5, "train-data"));
        assert_ne!(cfg.eval_data().seed, cfg.data.seed);
        assert_eq!(cfg.eval_data().world_seed, cfg.data.world_seed);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# header\n\nmask.steps = 10  # short run\n").unwrap();
        assert_eq!(cfg.mask.steps, 10);
    }

    #[test]
    fn full_preset_differs() {
        let p = RunConfig::full_scale();
        assert_eq!(p.txe.d_model, 1024);
        assert_eq!(p.txe.n_heads, 16);
        assert_ne!(p.hash(), RunConfig::desk_scale().hash());
    }
}
