//! Pooling of encoder features, the sigmoid attention gate and the task
//! heads that sit on top of it.

use crate::autodiff::{ParamId, ParamStore, Scope, Tensor, Var};
use crate::error::{dim_err, Result};
use crate::nn::{uniform_init, Linear, Mlp, ModelRng};

/// `(B, N, T, C) → (B, N·T)`: mean over `C`, then flatten.
pub fn pool_series(features: &Tensor) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 4 {
        return dim_err(format!("pool_series expects (B, N, T, C), got {s:?}"));
    }
    let c = s[3];
    let data = features.data().chunks(c).map(|r| r.iter().sum::<f64>() / c as f64).collect();
    Tensor::new(vec![s[0], s[1] * s[2]], data)
}

/// Tape version of [`pool_series`].
pub fn pool_series_var(scope: &mut Scope, features: Var) -> Result<Var> {
    let s = scope.tape.shape(features).to_vec();
    if s.len() != 4 {
        return dim_err(format!("pool_series expects (B, N, T, C), got {s:?}"));
    }
    let pooled = scope.tape.mean_last(features)?;
    scope.tape.reshape(pooled, &[s[0], s[1] * s[2]])
}

/// Bottleneck width used by the gate for a given input width.
pub fn gate_bottleneck(width: usize) -> usize {
    width.div_ceil(4).max(1)
}

/// `X̂ = σ(ReLU(X·W₁)·W₂) ⊙ X`, no biases.
#[derive(Debug, Clone, Copy)]
pub struct AttentionGate {
    pub w1: ParamId,
    pub w2: ParamId,
    pub width: usize,
    pub bottleneck: usize,
}

impl AttentionGate {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut ModelRng) -> Result<Self> {
        let bottleneck = gate_bottleneck(width);
        Ok(Self {
            w1: store.insert(format!("{name}.w1"), uniform_init(&[width, bottleneck], width, rng))?,
            w2: store.insert(format!("{name}.w2"), uniform_init(&[bottleneck, width], bottleneck, rng))?,
            width,
            bottleneck,
        })
    }

    /// Returns the gated input and the attention map, both `(B, width)`.
    pub fn forward(&self, scope: &mut Scope, x: Var) -> Result<(Var, Var)> {
        let s = scope.tape.shape(x);
        if s.len() != 2 || s[1] != self.width {
            return dim_err(format!("gate expects (B, {}), got {s:?}", self.width));
        }
        let w1 = scope.param(self.w1)?;
        let w2 = scope.param(self.w2)?;
        let h = scope.tape.matmul(x, w1)?;
        let h = scope.tape.relu(h)?;
        let a = scope.tape.matmul(h, w2)?;
        let gate = scope.tape.sigmoid(a)?;
        let out = scope.tape.mul(gate, x)?;
        Ok((out, gate))
    }
}

/// Fuses `x (B, D + N·T)` with fixed parameters; returns `(X̂, gate)`.
pub fn fuse(gate: &AttentionGate, params: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut scope = Scope::new(params, false);
    let xv = scope.tape.leaf(x)?;
    let (out, g) = gate.forward(&mut scope, xv)?;
    Ok((scope.tape.to_tensor(out), scope.tape.to_tensor(g)))
}

/// Row-wise softmax of `(B, K)` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Linear map from each channel's flattened `(T·C)` features to `H` steps.
#[derive(Debug, Clone, Copy)]
pub struct ForecastHead {
    pub linear: Linear,
    pub horizon: usize,
}

impl ForecastHead {
    pub fn new(store: &mut ParamStore, name: &str, patches: usize, embed_dim: usize, horizon: usize, rng: &mut ModelRng) -> Result<Self> {
        if horizon == 0 {
            return dim_err("forecast horizon must be at least 1");
        }
        Ok(Self {
            linear: Linear::new(store, name, patches * embed_dim, horizon, true, rng)?,
            horizon,
        })
    }

    /// `(B, N, T, C) → (B, N, H)` in normalized units.
    pub fn forward(&self, scope: &mut Scope, features: Var) -> Result<Var> {
        let s = scope.tape.shape(features).to_vec();
        if s.len() != 4 || s[2] * s[3] != self.linear.fan_in {
            return dim_err(format!(
                "forecast head expects (B, N, T, C) with T·C = {}, got {s:?}",
                self.linear.fan_in
            ));
        }
        let flat = scope.tape.reshape(features, &[s[0], s[1], s[2] * s[3]])?;
        self.linear.forward(scope, flat)
    }
}

/// Classification MLP producing logits.
pub fn predict_class(head: &Mlp, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut scope = Scope::new(params, false);
    let xv = scope.tape.leaf(x)?;
    let y = head.forward(&mut scope, xv)?;
    Ok(scope.tape.to_tensor(y))
}
