//! Patched RWKV encoder: stacked residual blocks of time mixing (linear
//! interpolation with the previous token, multi-head WKV, sigmoid output
//! gate) and channel mixing (squared-ReLU key, sigmoid receptance).

mod wkv;

pub use wkv::{multihead_gate, wkv_direct, wkv_recurrent};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Scope, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{uniform_init, ModelRng};
use crate::preprocess::PatchTokens;

/// Layer-norm epsilon inside the residual blocks.
pub const LN_EPS: f64 = 1e-5;

/// Decay range covered by the initial `w` across each head's dimensions.
pub const DECAY_INIT_RANGE: (f64, f64) = (0.3, 0.95);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            embed_dim: 128,
            heads: 4,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Contract("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Contract(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Contract(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Time-mixing parameters. `mu_*` are stored unconstrained and squashed
/// with a sigmoid; `decay_raw` likewise maps to `w ∈ (0, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct TimeMixParams {
    pub w_r: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub mu_r: ParamId,
    pub mu_k: ParamId,
    pub mu_v: ParamId,
    pub decay_raw: ParamId,
    pub bonus: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelMixParams {
    pub w_k: ParamId,
    pub w_r: ParamId,
    pub w_v: ParamId,
    pub mu_k: ParamId,
    pub mu_r: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, scope: &mut Scope, x: Var) -> Result<Var> {
        let g = scope.param(self.gamma)?;
        let b = scope.param(self.beta)?;
        scope.tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub ln_time: LayerNormParams,
    pub time_mix: TimeMixParams,
    pub ln_channel: LayerNormParams,
    pub channel_mix: ChannelMixParams,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Initial decays, log-spaced over [`DECAY_INIT_RANGE`] within each head.
pub fn initial_decay(heads: usize, head_dim: usize) -> Tensor {
    let (lo, hi) = DECAY_INIT_RANGE;
    Tensor::from_fn(&[heads, head_dim], |i| {
        let j = i % head_dim;
        let frac = if head_dim == 1 { 1.0 } else { j as f64 / (head_dim - 1) as f64 };
        (lo.ln() + frac * (hi.ln() - lo.ln())).exp()
    })
}

impl TimeMixParams {
    fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut ModelRng) -> Result<Self> {
        let c = cfg.embed_dim;
        let lin = |store: &mut ParamStore, n: &str, rng: &mut ModelRng| {
            store.insert(format!("{name}.{n}"), uniform_init(&[c, c], c, rng))
        };
        let w_r = lin(store, "w_r", rng)?;
        let w_k = lin(store, "w_k", rng)?;
        let w_v = lin(store, "w_v", rng)?;
        let w_o = store.insert(format!("{name}.w_o"), Tensor::zeros(&[c, c]))?;
        let decay = initial_decay(cfg.heads, cfg.head_dim());
        let decay_raw = Tensor::from_fn(decay.shape(), |i| logit(decay.data()[i]));
        Ok(Self {
            w_r,
            w_k,
            w_v,
            w_o,
            mu_r: store.insert(format!("{name}.mu_r"), Tensor::zeros(&[c]))?,
            mu_k: store.insert(format!("{name}.mu_k"), Tensor::zeros(&[c]))?,
            mu_v: store.insert(format!("{name}.mu_v"), Tensor::zeros(&[c]))?,
            decay_raw: store.insert(format!("{name}.decay_raw"), decay_raw)?,
            bonus: store.insert(
                format!("{name}.bonus"),
                Tensor::full(&[cfg.heads, cfg.head_dim()], 1.0),
            )?,
        })
    }
}

impl ChannelMixParams {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut ModelRng) -> Result<Self> {
        Ok(Self {
            w_k: store.insert(format!("{name}.w_k"), uniform_init(&[c, c], c, rng))?,
            w_r: store.insert(format!("{name}.w_r"), uniform_init(&[c, c], c, rng))?,
            w_v: store.insert(format!("{name}.w_v"), Tensor::zeros(&[c, c]))?,
            mu_k: store.insert(format!("{name}.mu_k"), Tensor::zeros(&[c]))?,
            mu_r: store.insert(format!("{name}.mu_r"), Tensor::zeros(&[c]))?,
        })
    }
}

/// Previous-token view: row `t` holds `x_{t−1}`, row 0 is zero.
pub fn time_shift(scope: &mut Scope, x: Var) -> Result<Var> {
    scope.tape.time_shift(x)
}

fn mixed_projection(scope: &mut Scope, x: Var, shifted: Var, mu_raw: ParamId, w: ParamId) -> Result<Var> {
    let mu = scope.param(mu_raw)?;
    let mu = scope.tape.sigmoid(mu)?;
    let mixed = scope.tape.lerp(mu, x, shifted)?;
    let w = scope.param(w)?;
    scope.tape.matmul(mixed, w)
}

/// Receptance, key and value: each a linear map of `μ ⊙ x_t + (1 − μ) ⊙ x_{t−1}`.
pub fn rkv_projections(
    scope: &mut Scope,
    x: Var,
    shifted: Var,
    p: &TimeMixParams,
) -> Result<(Var, Var, Var)> {
    let r = mixed_projection(scope, x, shifted, p.mu_r, p.w_r)?;
    let k = mixed_projection(scope, x, shifted, p.mu_k, p.w_k)?;
    let v = mixed_projection(scope, x, shifted, p.mu_v, p.w_v)?;
    Ok((r, k, v))
}

/// Full time-mixing sub-block on `(…, T, C)` input.
pub fn time_mix(scope: &mut Scope, x: Var, p: &TimeMixParams) -> Result<Var> {
    let shifted = time_shift(scope, x)?;
    let (r, k, v) = rkv_projections(scope, x, shifted, p)?;
    let gate = scope.tape.sigmoid(r)?;
    let decay = scope.param(p.decay_raw)?;
    let decay = scope.tape.sigmoid(decay)?;
    let bonus = scope.param(p.bonus)?;
    let y = scope.tape.wkv_gated(gate, k, v, decay, bonus)?;
    let w_o = scope.param(p.w_o)?;
    scope.tape.matmul(y, w_o)
}

/// Channel mixing: `σ(r′) ⊙ (relu²(k′)·W_v′)` with μ-interpolated `k′`, `r′`.
pub fn channel_mix(scope: &mut Scope, x: Var, shifted: Var, p: &ChannelMixParams) -> Result<Var> {
    let k = mixed_projection(scope, x, shifted, p.mu_k, p.w_k)?;
    let r = mixed_projection(scope, x, shifted, p.mu_r, p.w_r)?;
    let k = scope.tape.relu_squared(k)?;
    let w_v = scope.param(p.w_v)?;
    let v = scope.tape.matmul(k, w_v)?;
    let r = scope.tape.sigmoid(r)?;
    scope.tape.mul(r, v)
}

/// Stack of residual RWKV blocks with pre-sub-block layer normalization.
#[derive(Debug, Clone)]
pub struct RwkvEncoder {
    pub config: EncoderConfig,
    pub blocks: Vec<BlockParams>,
}

impl RwkvEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut ModelRng) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.layers)
            .map(|l| {
                let name = format!("{prefix}.block{l}");
                Ok(BlockParams {
                    ln_time: LayerNormParams::new(store, &format!("{name}.ln_time"), config.embed_dim)?,
                    time_mix: TimeMixParams::new(store, &format!("{name}.time_mix"), &config, rng)?,
                    ln_channel: LayerNormParams::new(store, &format!("{name}.ln_channel"), config.embed_dim)?,
                    channel_mix: ChannelMixParams::new(
                        store,
                        &format!("{name}.channel_mix"),
                        config.embed_dim,
                        rng,
                    )?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, blocks })
    }

    /// Encodes `(…, T, C)` tokens; every leading index is an independent
    /// sequence. `dropout_rng` enables dropout on the residual branches.
    pub fn encode(&self, scope: &mut Scope, tokens: Var, mut dropout_rng: Option<&mut ModelRng>) -> Result<Var> {
        let shape = scope.tape.shape(tokens).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] != self.config.embed_dim {
            return dim_err(format!(
                "encoder expects (…, T, {}) tokens, got {shape:?}",
                self.config.embed_dim
            ));
        }
        let mut x = tokens;
        for block in &self.blocks {
            let h = block.ln_time.forward(scope, x)?;
            let mut o = time_mix(scope, h, &block.time_mix)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                o = scope.tape.dropout(o, self.config.dropout, rng)?;
            }
            x = scope.tape.add(x, o)?;

            let h = block.ln_channel.forward(scope, x)?;
            let shifted = time_shift(scope, h)?;
            let mut o = channel_mix(scope, h, shifted, &block.channel_mix)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                o = scope.tape.dropout(o, self.config.dropout, rng)?;
            }
            x = scope.tape.add(x, o)?;
        }
        Ok(x)
    }

    /// Inference-only encoding of embedded patch tokens `(B, N, T, C)`.
    pub fn encode_tokens(&self, params: &ParamStore, tokens: &PatchTokens) -> Result<Tensor> {
        let mut scope = Scope::new(params, false);
        let x = scope.tape.leaf(&tokens.tokens)?;
        let y = self.encode(&mut scope, x, None)?;
        Ok(scope.tape.to_tensor(y))
    }
}
