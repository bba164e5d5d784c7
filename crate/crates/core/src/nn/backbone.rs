//! Toy clip encoder: a per-timestep GELU layer, temporal mean pooling, and a
//! linear map to the event embedding width.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::params::{Bound, Linear, ParamStore};
use crate::rng::rng_from_seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub d_in: usize,
    /// Timesteps per clip (T).
    pub window: usize,
    pub hidden: usize,
    pub d_model: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            window: 8,
            hidden: 64,
            d_model: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.window == 0 || self.hidden == 0 || self.d_model == 0 {
            return Err(Error::Config("backbone: all widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Backbone<F = f32> {
    pub config: BackboneConfig,
    pub params: ParamStore<F>,
    frame: Linear,
    pool_out: Linear,
}

impl<F: Scalar> Backbone<F> {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut params = ParamStore::new();
        let frame = Linear::new(&mut params, "backbone.frame", config.d_in, config.hidden, &mut rng);
        let pool_out = Linear::new(&mut params, "backbone.out", config.hidden, config.d_model, &mut rng);
        Ok(Self {
            config,
            params,
            frame,
            pool_out,
        })
    }

    /// `clips` is `(B*T) x d_in`; returns `B x d_model`.
    pub fn forward(&self, tape: &mut Tape<F>, bound: &Bound, clips: Var) -> Result<Var> {
        let cv = tape.value(clips);
        let t = self.config.window;
        if cv.cols() != self.config.d_in || cv.rows() % t != 0 {
            return Err(Error::shape("backbone_encode", cv.shape(), &[t, self.config.d_in]));
        }
        let h = self.frame.forward(tape, bound, clips)?;
        let h = tape.gelu(h);
        let pooled = tape.block_mean_rows(h, t)?;
        self.pool_out.forward(tape, bound, pooled)
    }

    /// Encodes stacked clips without recording gradients.
    pub fn encode_batch(&self, clips: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let c = tape.constant(clips.clone());
        let out = self.forward(&mut tape, &bound, c)?;
        Ok(tape.value(out).clone())
    }
}

/// Maps one `T x d_in` clip to a single event vector.
pub fn backbone_encode<F: Scalar>(clip: &Tensor<F>, backbone: &Backbone<F>) -> Result<Tensor<F>> {
    let cfg = &backbone.config;
    if clip.rows() != cfg.window || clip.cols() != cfg.d_in {
        return Err(Error::shape("backbone_encode", clip.shape(), &[cfg.window, cfg.d_in]));
    }
    let out = backbone.encode_batch(clip)?;
    Tensor::new(vec![cfg.d_model], out.into_data())
}
