//! Assembled models: the fused classifier, its single-modality ablations
//! and the forecaster.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Scope, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::fusion::{pool_series_var, softmax, AttentionGate, ForecastHead};
use crate::nn::{uniform_init, Mlp, ModelRng};
use crate::preprocess::{denormalize, instance_normalize, patch, patch_count, NormStats, PatchEmbedding, SeriesBatch};
use crate::rwkv::{EncoderConfig, RwkvEncoder};
use crate::tabular::TabularEmbedder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Series and tabular branches fused through the attention gate.
    TabulaTime,
    TabularOnly,
    SeriesOnly,
    Forecaster,
}

impl ModelKind {
    pub fn uses_series(self) -> bool {
        !matches!(self, ModelKind::TabularOnly)
    }

    pub fn uses_tabular(self) -> bool {
        matches!(self, ModelKind::TabulaTime | ModelKind::TabularOnly)
    }

    pub fn is_forecaster(self) -> bool {
        self == ModelKind::Forecaster
    }
}

fn default_patch() -> usize {
    24
}

fn default_tab_dim() -> usize {
    31
}

fn default_hidden() -> usize {
    64
}

fn default_classes() -> usize {
    2
}

fn default_horizon() -> usize {
    48
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_patch")]
    pub stride: usize,
    /// Width `D` of the tabular embedding.
    #[serde(default = "default_tab_dim")]
    pub tab_dim: usize,
    #[serde(default = "default_hidden")]
    pub head_hidden: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            encoder: EncoderConfig::default(),
            patch_size: default_patch(),
            stride: default_patch(),
            tab_dim: default_tab_dim(),
            head_hidden: default_hidden(),
            classes: default_classes(),
            horizon: default_horizon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::Contract("patch size and stride must be positive".into()));
        }
        if !self.kind.is_forecaster() && self.classes < 2 {
            return Err(Error::Contract("a classifier needs at least two classes".into()));
        }
        if self.tab_dim == 0 || self.head_hidden == 0 || self.horizon == 0 {
            return Err(Error::Contract("tab_dim, head_hidden and horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Input geometry a model was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputShape {
    #[serde(default)]
    pub channel_names: Vec<String>,
    #[serde(default)]
    pub series_len: usize,
    #[serde(default)]
    pub tab_width: usize,
}

impl InputShape {
    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }
}

/// One batch of model inputs: raw series `(B, N, L)` and/or encoded
/// tabular rows `(B, F)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Inputs<'a> {
    pub series: Option<&'a Tensor>,
    pub tabular: Option<&'a Tensor>,
}

impl Inputs<'_> {
    pub fn batch(&self) -> Option<usize> {
        self.series.or(self.tabular).map(|t| t.shape()[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Classes(Vec<usize>),
    /// Raw future values `(B, N, H)`.
    Future(Tensor),
}

/// Tape handles produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// Logits `(B, K)` or normalized forecasts `(B, N, H)`.
    pub output: Var,
    pub gate: Option<Var>,
    pub norm: Option<SeriesBatch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub output: Tensor,
    /// Class probabilities for classifiers.
    pub probabilities: Option<Tensor>,
    /// Gate values `(B, width)` for the gated variants.
    pub attention: Option<Tensor>,
    /// Forecasts in the instance-normalized space.
    pub normalized: Option<Tensor>,
}

impl Prediction {
    /// Probability of class 1 per row.
    pub fn positive_scores(&self) -> Option<Vec<f64>> {
        let p = self.probabilities.as_ref()?;
        let k = p.shape()[1];
        Some(p.data().chunks(k).map(|r| r[1]).collect())
    }

    pub fn predicted_classes(&self) -> Option<Vec<usize>> {
        let p = self.probabilities.as_ref()?;
        let k = p.shape()[1];
        Some(
            p.data()
                .chunks(k)
                .map(|r| (0..k).max_by(|&i, &j| r[i].total_cmp(&r[j]).then(j.cmp(&i))).unwrap_or(0))
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub shape: InputShape,
    pub params: ParamStore,
    patch_embed: Option<PatchEmbedding>,
    encoder: Option<RwkvEncoder>,
    tabular: Option<TabularEmbedder>,
    gate: Option<AttentionGate>,
    head: Option<Mlp>,
    forecast: Option<ForecastHead>,
}

const PREDICT_CHUNK: usize = 256;

impl Model {
    pub fn new(config: ModelConfig, shape: InputShape, seed: u64) -> Result<Self> {
        config.validate()?;
        let kind = config.kind;
        let mut rng = ModelRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (mut patch_embed, mut encoder, mut tabular, mut gate, mut head, mut forecast) =
            (None, None, None, None, None, None);
        let c = config.encoder.embed_dim;

        let mut series_width = 0;
        if kind.uses_series() {
            if shape.channels() == 0 || shape.series_len < config.patch_size {
                return dim_err(format!(
                    "series input needs at least one channel and {} steps",
                    config.patch_size
                ));
            }
            let t = patch_count(shape.series_len, config.patch_size, config.stride);
            series_width = shape.channels() * t;
            let proj = uniform_init(&[config.patch_size, c], config.patch_size, &mut rng);
            patch_embed = Some(PatchEmbedding {
                projection: params.insert("patch.projection", proj)?,
            });
            encoder = Some(RwkvEncoder::new(&mut params, "encoder", config.encoder, &mut rng)?);
            if kind.is_forecaster() {
                forecast = Some(ForecastHead::new(&mut params, "forecast", t, c, config.horizon, &mut rng)?);
            }
        }
        let mut tab_width = 0;
        if kind.uses_tabular() {
            if shape.tab_width == 0 {
                return dim_err("tabular input has no columns");
            }
            tabular = Some(TabularEmbedder::new(&mut params, "tabular", shape.tab_width, config.tab_dim, &mut rng)?);
            tab_width = config.tab_dim;
        }
        if !kind.is_forecaster() {
            let width = tab_width + series_width;
            if kind != ModelKind::SeriesOnly {
                gate = Some(AttentionGate::new(&mut params, "gate", width, &mut rng)?);
            }
            head = Some(Mlp::new(&mut params, "head", width, config.head_hidden, config.classes, &mut rng)?);
        }
        Ok(Self {
            config,
            shape,
            params,
            patch_embed,
            encoder,
            tabular,
            gate,
            head,
            forecast,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn patches(&self) -> usize {
        if self.kind().uses_series() {
            patch_count(self.shape.series_len, self.config.patch_size, self.config.stride)
        } else {
            0
        }
    }

    /// Column labels of the fused input (and of the attention map).
    pub fn fused_labels(&self) -> Vec<String> {
        let mut labels = Vec::new();
        if self.kind().uses_tabular() {
            labels.extend((0..self.config.tab_dim).map(|i| format!("tab_{i}")));
        }
        if self.kind().uses_series() && !self.kind().is_forecaster() {
            let t = self.patches();
            for name in &self.shape.channel_names {
                labels.extend((0..t).map(|p| format!("{name}_patch{p}")));
            }
        }
        labels
    }

    fn check_inputs(&self, inputs: &Inputs) -> Result<usize> {
        let b = inputs.batch().ok_or_else(|| Error::Contract("no inputs given".into()))?;
        if self.kind().uses_series() {
            let s = inputs.series.ok_or_else(|| Error::Contract("model needs series input".into()))?;
            let expect = [b, self.shape.channels(), self.shape.series_len];
            if s.shape() != expect {
                return dim_err(format!("series input {:?}, expected {expect:?}", s.shape()));
            }
        }
        if self.kind().uses_tabular() {
            let t = inputs.tabular.ok_or_else(|| Error::Contract("model needs tabular input".into()))?;
            let expect = [b, self.shape.tab_width];
            if t.shape() != expect {
                return dim_err(format!("tabular input {:?}, expected {expect:?}", t.shape()));
            }
        }
        Ok(b)
    }

    /// Normalizes, patches, embeds and encodes raw series into
    /// `(B, N, T, C)` features.
    fn encode_series(
        &self,
        scope: &mut Scope,
        series: &Tensor,
        dropout_rng: Option<&mut ModelRng>,
    ) -> Result<(Var, SeriesBatch)> {
        let (Some(embed), Some(encoder)) = (self.patch_embed, self.encoder.as_ref()) else {
            return Err(Error::State("model has no series branch".into()));
        };
        let batch = SeriesBatch::new(series.clone(), self.shape.channel_names.clone())?;
        let normed = instance_normalize(&batch)?;
        let windows = patch(&normed, self.config.patch_size, self.config.stride)?;
        let w = scope.tape.leaf(&windows)?;
        let tokens = embed.forward(scope, w)?;
        let features = encoder.encode(scope, tokens, dropout_rng)?;
        Ok((features, normed))
    }

    /// Records the forward pass on `scope`. Dropout is active only when a
    /// generator is supplied.
    pub fn forward(&self, scope: &mut Scope, inputs: &Inputs, dropout_rng: Option<&mut ModelRng>) -> Result<Forward> {
        let b = self.check_inputs(inputs)?;
        let mut norm = None;
        let mut series_features = None;
        if self.kind().uses_series() {
            let (f, n) = self.encode_series(scope, inputs.series.expect("checked"), dropout_rng)?;
            series_features = Some(f);
            norm = Some(n);
        }
        if let Some(head) = self.forecast {
            let output = head.forward(scope, series_features.expect("forecaster has series"))?;
            return Ok(Forward {
                output,
                gate: None,
                norm,
            });
        }

        let pooled = series_features.map(|f| pool_series_var(scope, f)).transpose()?;
        let tab = match (self.tabular, inputs.tabular) {
            (Some(emb), Some(rows)) => {
                let x = scope.tape.leaf(rows)?;
                Some(emb.forward(scope, x)?)
            }
            _ => None,
        };
        let x = match (tab, pooled) {
            (Some(t), Some(p)) => scope.tape.concat_last(t, p)?,
            (Some(t), None) => t,
            (None, Some(p)) => p,
            (None, None) => return Err(Error::State("model has no input branch".into())),
        };
        let (x, gate) = match self.gate {
            Some(g) => {
                let (out, map) = g.forward(scope, x)?;
                (out, Some(map))
            }
            None => (x, None),
        };
        let head = self.head.as_ref().ok_or_else(|| Error::State("classifier has no head".into()))?;
        let output = head.forward(scope, x)?;
        debug_assert_eq!(scope.tape.shape(output)[0], b);
        Ok(Forward { output, gate, norm })
    }

    /// Training loss: cross-entropy on logits, or MSE in normalized space.
    pub fn loss(&self, scope: &mut Scope, fwd: &Forward, target: &Target) -> Result<Var> {
        match (target, self.kind().is_forecaster()) {
            (Target::Classes(labels), false) => scope.tape.cross_entropy(fwd.output, labels),
            (Target::Future(future), true) => {
                let norm = fwd.norm.as_ref().ok_or_else(|| Error::State("forecast without normalization".into()))?;
                let target = normalize_future(future, norm)?;
                scope.tape.mse(fwd.output, target.data())
            }
            _ => Err(Error::Contract("target does not match the model task".into())),
        }
    }

    /// Inference in fixed-size chunks with parameters recorded as constants.
    pub fn predict(&self, inputs: &Inputs) -> Result<Prediction> {
        let b = self.check_inputs(inputs)?;
        let mut outputs = Vec::new();
        let mut attention = Vec::new();
        let mut normalized = Vec::new();
        for start in (0..b).step_by(PREDICT_CHUNK) {
            let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(b)).collect();
            let series = inputs.series.map(|s| select_rows(s, &idx)).transpose()?;
            let tabular = inputs.tabular.map(|s| select_rows(s, &idx)).transpose()?;
            let chunk = Inputs {
                series: series.as_ref(),
                tabular: tabular.as_ref(),
            };
            let mut scope = Scope::new(&self.params, false);
            let fwd = self.forward(&mut scope, &chunk, None)?;
            let out = scope.tape.to_tensor(fwd.output);
            if let Some(g) = fwd.gate {
                attention.push(scope.tape.to_tensor(g));
            }
            if let Some(norm) = fwd.norm.as_ref().filter(|_| self.kind().is_forecaster()) {
                outputs.push(denormalize(norm, &out)?);
                normalized.push(out);
            } else {
                outputs.push(out);
            }
        }
        let output = concat_rows(&outputs)?;
        let probabilities = (!self.kind().is_forecaster()).then(|| softmax(&output));
        Ok(Prediction {
            output,
            probabilities,
            attention: (!attention.is_empty()).then(|| concat_rows(&attention)).transpose()?,
            normalized: (!normalized.is_empty()).then(|| concat_rows(&normalized)).transpose()?,
        })
    }
}

/// `(y − mean) / std` with the per-instance statistics of the input window.
pub fn normalize_future(future: &Tensor, norm: &SeriesBatch) -> Result<Tensor> {
    let stats: &[NormStats] = norm
        .norm_stats
        .as_deref()
        .ok_or_else(|| Error::State("series batch is not normalized".into()))?;
    let s = future.shape();
    if s.len() != 3 || s[0] * s[1] != stats.len() {
        return dim_err(format!("future values {s:?} do not match {} series", stats.len()));
    }
    let mut out = future.clone();
    for (row, st) in out.data_mut().chunks_mut(s[2]).zip(stats) {
        row.iter_mut().for_each(|v| *v = (*v - st.mean) / st.std);
    }
    Ok(out)
}

/// Rows `idx` of the leading axis.
pub fn select_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let s = t.shape();
    let stride: usize = s[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * stride);
    for &i in idx {
        if i >= s[0] {
            return dim_err(format!("row {i} out of range for {} rows", s[0]));
        }
        data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
    }
    let mut shape = s.to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// Stacks tensors along the leading axis.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
    let tail = &first.shape()[1..];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        if &p.shape()[1..] != tail {
            return dim_err("row blocks differ in trailing shape");
        }
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] = rows;
    Tensor::new(shape, data)
}
