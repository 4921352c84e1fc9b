//! Optimization loop with early stopping, data splitting and evaluation.

mod adam;
pub mod metrics;
mod split;

pub use adam::{adam_step, Adam, AdamConfig, Moments};
pub use metrics::{
    classification_metrics, forecasting_metrics, ClassificationReport, Confusion, ForecastReport, MetricsReport,
    RocPoint, DEFAULT_THRESHOLD,
};
pub use split::{split, SplitConfig, Splits};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scope, Tensor};
use crate::error::{Error, Result};
use crate::model::{normalize_future, select_rows, Inputs, Model, Prediction, Target};
use crate::nn::ModelRng;
use crate::preprocess::{instance_normalize, SeriesBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Classification,
    Forecasting,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    16
}

fn default_epochs() -> usize {
    100
}

fn default_patience() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub task: Task,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            seed: 0,
            task: Task::Classification,
            split: SplitConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Contract(
                "learning_rate, batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Model inputs plus targets for a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub series: Option<Tensor>,
    pub tabular: Option<Tensor>,
    pub target: Target,
}

impl Dataset {
    pub fn len(&self) -> usize {
        match &self.target {
            Target::Classes(c) => c.len(),
            Target::Future(f) => f.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> Inputs<'_> {
        Inputs {
            series: self.series.as_ref(),
            tabular: self.tabular.as_ref(),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.target {
            Target::Classes(c) => Some(c),
            Target::Future(_) => None,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            series: self.series.as_ref().map(|s| select_rows(s, idx)).transpose()?,
            tabular: self.tabular.as_ref().map(|t| select_rows(t, idx)).transpose()?,
            target: match &self.target {
                Target::Classes(c) => Target::Classes(idx.iter().map(|&i| c[i]).collect()),
                Target::Future(f) => Target::Future(select_rows(f, idx)?),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

const EVAL_CHUNK: usize = 256;

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(op) => Error::Training {
            epoch,
            reason: format!("non-finite value in `{op}`"),
        },
        other => other,
    }
}

/// Mean loss over `data` without recording gradients.
pub fn dataset_loss(model: &Model, data: &Dataset) -> Result<f64> {
    let n = data.len();
    let mut total = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let chunk = data.select(&idx)?;
        let mut scope = Scope::new(&model.params, false);
        let fwd = model.forward(&mut scope, &chunk.inputs(), None)?;
        let loss = model.loss(&mut scope, &fwd, &chunk.target)?;
        total += scope.tape.value(loss)[0] * idx.len() as f64;
    }
    Ok(total / n as f64)
}

fn check_task(model: &Model, task: Task) -> Result<()> {
    if model.kind().is_forecaster() != (task == Task::Forecasting) {
        return Err(Error::Contract(format!(
            "{:?} model cannot run a {task:?} task",
            model.kind()
        )));
    }
    Ok(())
}

/// Mini-batch Adam with early stopping on validation loss. On return the
/// model holds the parameters of the best validation epoch.
pub fn train(model: &mut Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    check_task(model, cfg.task)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let mut adam = Adam::new(&model.params, cfg.learning_rate, cfg.adam);
    let mut shuffle_rng = ModelRng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ModelRng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let use_dropout = model.config.encoder.dropout > 0.0;

    let mut history = History {
        best_val_loss: f64::INFINITY,
        ..History::default()
    };
    let mut best = model.params.clone();
    let mut waited = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let data = train.select(batch)?;
            let mut scope = Scope::new(&model.params, true);
            let rng = use_dropout.then_some(&mut dropout_rng);
            let fwd = model.forward(&mut scope, &data.inputs(), rng).map_err(diverged(epoch))?;
            let loss = model.loss(&mut scope, &fwd, &data.target).map_err(diverged(epoch))?;
            let value = scope.tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("loss is {value}"),
                });
            }
            total += value * batch.len() as f64;
            let grads = scope.backward(loss).map_err(diverged(epoch))?;
            adam.step(&mut model.params, &grads)?;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = dataset_loss(model, val).map_err(diverged(epoch))?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: format!("validation loss is {val_loss}"),
            });
        }
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = model.params.clone();
            waited = 0;
        } else {
            waited += 1;
            if waited >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.params.load_values(&best)?;
    Ok(history)
}

/// Metrics of `model` on `data` together with the raw predictions.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(MetricsReport, Prediction)> {
    let pred = model.predict(&data.inputs())?;
    let report = match &data.target {
        Target::Classes(labels) => {
            let scores = pred
                .positive_scores()
                .ok_or_else(|| Error::Evaluation("model produced no class probabilities".into()))?;
            MetricsReport::Classification(classification_metrics(labels, &scores, DEFAULT_THRESHOLD)?)
        }
        Target::Future(future) => {
            let series = data
                .series
                .as_ref()
                .ok_or_else(|| Error::Evaluation("forecast evaluation needs series input".into()))?;
            let norm = instance_normalize(&SeriesBatch::new(series.clone(), model.shape.channel_names.clone())?)?;
            let target = normalize_future(future, &norm)?;
            let normalized = pred
                .normalized
                .as_ref()
                .ok_or_else(|| Error::Evaluation("model produced no forecasts".into()))?;
            let (mse, mae) = forecasting_metrics(normalized, &target)?;
            let (mse_d, mae_d) = forecasting_metrics(&pred.output, future)?;
            MetricsReport::Forecasting(ForecastReport {
                mse,
                mae,
                mse_denormalized: mse_d,
                mae_denormalized: mae_d,
            })
        }
    };
    Ok((report, pred))
}
