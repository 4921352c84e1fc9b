//! Classification and forecasting metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One point of the ROC curve: rates when predicting positive for every
/// score `>= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub threshold: f64,
    pub confusion: Confusion,
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub mse: f64,
    pub mae: f64,
    pub mse_denormalized: f64,
    pub mae_denormalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum MetricsReport {
    Classification(ClassificationReport),
    Forecasting(ForecastReport),
}

pub fn confusion(labels: &[usize], scores: &[f64], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&y, &s) in labels.iter().zip(scores) {
        match (y == 1, s >= threshold) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    c
}

/// ROC over every distinct score, from the strictest threshold down.
/// Empty when a class is absent.
pub fn roc_curve(labels: &[usize], scores: &[f64]) -> Vec<RocPoint> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    points
}

/// Trapezoidal area under a ROC curve.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn classification_metrics(labels: &[usize], scores: &[f64], threshold: f64) -> Result<ClassificationReport> {
    if labels.is_empty() || labels.len() != scores.len() {
        return Err(Error::Contract(format!(
            "{} labels for {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Contract(format!("label {bad} is not binary")));
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Contract(format!("score {bad} outside [0, 1]")));
    }
    let c = confusion(labels, scores, threshold);
    let roc = roc_curve(labels, scores);
    let auc = if roc.is_empty() {
        log::warn!("only one class present; AUC is undefined");
        None
    } else {
        Some(auc(&roc))
    };
    Ok(ClassificationReport {
        accuracy: c.accuracy(),
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        auc,
        threshold,
        confusion: c,
        roc,
    })
}

/// `(MSE, MAE)` of two equally shaped tensors.
pub fn forecasting_metrics(predicted: &Tensor, actual: &Tensor) -> Result<(f64, f64)> {
    if predicted.shape() != actual.shape() {
        return Err(Error::Contract(format!(
            "prediction {:?} and target {:?} differ in shape",
            predicted.shape(),
            actual.shape()
        )));
    }
    let n = actual.len() as f64;
    let (se, ae) = predicted
        .data()
        .iter()
        .zip(actual.data())
        .fold((0.0, 0.0), |(se, ae), (p, a)| (se + (p - a).powi(2), ae + (p - a).abs()));
    Ok((se / n, ae / n))
}
