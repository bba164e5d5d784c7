//! Transformer encoder contextualizer over event tokens.
//!
//! Tokens are optionally replaced by a learned mask token, projected, summed
//! with a learned per-position embedding, and passed through post-norm
//! encoder layers (bidirectional self-attention, then a GELU feed-forward
//! block, each with a residual connection).

use rand::Rng as _;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::params::{normal_init, Bound, LayerNormParams, Linear, ParamId, ParamStore};
use crate::pretrain::mask::MaskPlan;
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TxEConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Tokens per input window (N).
    pub seq_len: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for TxEConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl TxEConfig {
    pub fn desk_scale() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            seq_len: 5,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }

    /// 3 layers, 16 heads, width 1024.
    pub fn full_scale() -> Self {
        Self {
            n_layers: 3,
            n_heads: 16,
            d_model: 1024,
            d_ff: 4096,
            seq_len: 5,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("txe: layer, head and width counts must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "txe: d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Config(format!("txe: seq_len must be >= 2, got {}", self.seq_len)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("txe: dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Whether a forward pass may apply dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    pub ln_attn: LayerNormParams,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ln_ff: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct TxE<F = f32> {
    pub config: TxEConfig,
    pub params: ParamStore<F>,
    input: Linear,
    output: Linear,
    position: ParamId,
    mask_token: ParamId,
    layers: Vec<EncoderLayer>,
}

/// `x + W_o * MultiHead(x)`. Returns the output and the attention node,
/// whose weights can be read with [`Tape::attention_weights`].
pub fn mhsa_forward<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    attn: &AttentionParams,
    x: Var,
    n_heads: usize,
    seq_len: usize,
) -> Result<(Var, Var)> {
    let q = attn.query.forward(tape, bound, x)?;
    let k = attn.key.forward(tape, bound, x)?;
    let v = attn.value.forward(tape, bound, x)?;
    let heads = tape.attention(q, k, v, n_heads, seq_len)?;
    let o = attn.out.forward(tape, bound, heads)?;
    Ok((tape.add(x, o)?, heads))
}

fn maybe_dropout<F: Scalar>(tape: &mut Tape<F>, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let n = tape.value(x).numel();
            let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= p).collect();
            tape.dropout(x, &keep, p)
        }
        _ => Ok(x),
    }
}

impl<F: Scalar> TxE<F> {
    pub fn init(config: TxEConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let d = config.d_model;
        let mut params = ParamStore::new();
        let input = Linear::new(&mut params, "txe.input", d, d, &mut rng);
        let position = params.add("txe.position", normal_init(&[config.seq_len, d], 0.02, &mut rng));
        let mask_token = params.add("txe.mask_token", normal_init(&[d], 0.02, &mut rng));
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("txe.layer{l}");
                EncoderLayer {
                    attn: AttentionParams {
                        query: Linear::new(&mut params, &format!("{p}.attn.query"), d, d, &mut rng),
                        key: Linear::new(&mut params, &format!("{p}.attn.key"), d, d, &mut rng),
                        value: Linear::new(&mut params, &format!("{p}.attn.value"), d, d, &mut rng),
                        out: Linear::new(&mut params, &format!("{p}.attn.out"), d, d, &mut rng),
                    },
                    ln_attn: LayerNormParams::new(&mut params, &format!("{p}.ln_attn"), d),
                    ff_in: Linear::new(&mut params, &format!("{p}.ff_in"), d, config.d_ff, &mut rng),
                    ff_out: Linear::new(&mut params, &format!("{p}.ff_out"), config.d_ff, d, &mut rng),
                    ln_ff: LayerNormParams::new(&mut params, &format!("{p}.ln_ff"), d),
                }
            })
            .collect();
        let output = Linear::new(&mut params, "txe.output", d, d, &mut rng);
        Ok(Self {
            config,
            params,
            input,
            output,
            position,
            mask_token,
            layers,
        })
    }

    pub fn position_id(&self) -> ParamId {
        self.position
    }

    pub fn mask_token_id(&self) -> ParamId {
        self.mask_token
    }

    pub fn mask_token(&self) -> &Tensor<F> {
        self.params.get(self.mask_token)
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    /// Forward pass over `B` stacked windows: `tokens` is `(B*N) x d_model`,
    /// `mask` (if given) flags the rows replaced by the mask token.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        tokens: Var,
        mask: Option<&[bool]>,
        mut mode: Mode<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let tv = tape.value(tokens);
        if tv.cols() != cfg.d_model || tv.rows() % cfg.seq_len != 0 {
            return Err(Error::shape("txe_forward", tv.shape(), &[cfg.seq_len, cfg.d_model]));
        }
        let windows = tv.rows() / cfg.seq_len;
        let x = match mask {
            Some(m) => tape.mask_rows(tokens, bound.var(self.mask_token), m)?,
            None => tokens,
        };
        let mut h = self.input.forward(tape, bound, x)?;
        let pos = bound.var(self.position);
        let tiled = if windows == 1 {
            pos
        } else {
            tape.concat_rows(&vec![pos; windows])?
        };
        h = tape.add(h, tiled)?;
        for layer in &self.layers {
            let (a, _) = mhsa_forward(tape, bound, &layer.attn, h, cfg.n_heads, cfg.seq_len)?;
            let a = maybe_dropout(tape, a, cfg.dropout, &mut mode)?;
            h = layer.ln_attn.forward(tape, bound, a, cfg.ln_eps)?;
            let f = layer.ff_in.forward(tape, bound, h)?;
            let f = tape.gelu(f);
            let f = layer.ff_out.forward(tape, bound, f)?;
            let f = maybe_dropout(tape, f, cfg.dropout, &mut mode)?;
            let r = tape.add(h, f)?;
            h = layer.ln_ff.forward(tape, bound, r, cfg.ln_eps)?;
        }
        self.output.forward(tape, bound, h)
    }

    /// Row mask for a batch of windows with optional per-window plans.
    pub fn mask_rows_for(&self, plans: &[Option<MaskPlan>]) -> Result<Vec<bool>> {
        let n = self.config.seq_len;
        let mut rows = Vec::with_capacity(plans.len() * n);
        for plan in plans {
            match plan {
                Some(p) => {
                    p.check_len(n)?;
                    rows.extend((1..=n).map(|pos| p.contains(pos)));
                }
                None => rows.extend(std::iter::repeat_n(false, n)),
            }
        }
        Ok(rows)
    }

    /// Contextualizes one `N x d_model` window without recording gradients.
    pub fn forward_window(&self, tokens: &Tensor<F>, plan: Option<&MaskPlan>) -> Result<Tensor<F>> {
        let n = self.config.seq_len;
        if tokens.rows() != n || tokens.cols() != self.config.d_model {
            return Err(Error::shape("txe_forward", tokens.shape(), &[n, self.config.d_model]));
        }
        self.forward_windows(tokens, &[plan.copied()])
    }

    /// Contextualizes stacked windows without recording gradients.
    pub fn forward_windows(&self, tokens: &Tensor<F>, plans: &[Option<MaskPlan>]) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let t = tape.constant(tokens.clone());
        let any = plans.iter().any(Option::is_some);
        let mask = if any { Some(self.mask_rows_for(plans)?) } else { None };
        if tokens.rows() != plans.len() * self.config.seq_len {
            return Err(Error::shape("txe_forward", tokens.shape(), &[plans.len() * self.config.seq_len]));
        }
        let out = self.forward(&mut tape, &bound, t, mask.as_deref(), Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    pub fn cast<G: Scalar>(&self) -> TxE<G> {
        TxE {
            config: self.config.clone(),
            params: self.params.cast(),
            input: self.input,
            output: self.output,
            position: self.position,
            mask_token: self.mask_token,
            layers: self.layers.clone(),
        }
    }
}

/// Plain contextualization `v_hat` of one window, optionally masked.
pub fn txe_forward<F: Scalar>(tokens: &Tensor<F>, txe: &TxE<F>, plan: Option<&MaskPlan>) -> Result<Tensor<F>> {
    txe.forward_window(tokens, plan)
}
