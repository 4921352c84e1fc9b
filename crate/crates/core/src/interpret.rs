//! Permutation importance over tabular feature groups and over day-patch
//! blocks of the series window.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::model::Model;
use crate::nn::ModelRng;
use crate::preprocess::patch_count;
use crate::tabular::FeatureGroup;
use crate::train::{classification_metrics, dataset_loss, evaluate, Dataset, DEFAULT_THRESHOLD};

pub const DEFAULT_REPEATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Auc,
    /// Training loss (cross-entropy or normalized MSE).
    Loss,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Loss)
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Auc => "auc",
            Metric::Loss => "loss",
        }
    }

    pub fn score(self, model: &Model, data: &Dataset) -> Result<f64> {
        match self {
            Metric::Loss => dataset_loss(model, data),
            Metric::Accuracy | Metric::Auc => {
                let labels = data
                    .labels()
                    .ok_or_else(|| Error::Evaluation(format!("{} needs class labels", self.name())))?;
                let pred = model.predict(&data.inputs())?;
                let scores = pred
                    .positive_scores()
                    .ok_or_else(|| Error::Evaluation("model produced no probabilities".into()))?;
                let r = classification_metrics(labels, &scores, DEFAULT_THRESHOLD)?;
                match self {
                    Metric::Accuracy => Ok(r.accuracy),
                    _ => r
                        .auc
                        .ok_or_else(|| Error::Evaluation("AUC undefined: one class in evaluation data".into())),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub feature: String,
    pub importance: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub metric: String,
    pub baseline: f64,
    pub repeats: usize,
    pub entries: Vec<ImportanceEntry>,
}

impl ImportanceReport {
    /// Feature names from most to least important (stable on ties).
    pub fn ranking(&self) -> Vec<&str> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        idx.sort_by(|&a, &b| self.entries[b].importance.total_cmp(&self.entries[a].importance));
        idx.into_iter().map(|i| self.entries[i].feature.as_str()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,importance,std\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.feature, e.importance, e.std));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    /// 1 is the patch closest to the event.
    pub day_index: usize,
    pub importance: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepImportanceReport {
    pub metric: String,
    pub baseline: f64,
    pub repeats: usize,
    pub entries: Vec<StepEntry>,
}

impl StepImportanceReport {
    pub fn most_important_day(&self) -> Option<usize> {
        self.entries
            .iter()
            .fold(None::<&StepEntry>, |best, e| match best {
                Some(b) if b.importance >= e.importance => Some(b),
                _ => Some(e),
            })
            .map(|e| e.day_index)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("day,importance,std\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.day_index, e.importance, e.std));
        }
        s
    }
}

/// Rows of `x (B, F)` reordered by `perm` inside `cols`; other columns stay.
pub fn permute_columns(x: &Tensor, cols: &Range<usize>, perm: &[usize]) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 || perm.len() != s[0] || cols.end > s[1] {
        return dim_err(format!("cannot permute columns {cols:?} of {s:?} with {} rows", perm.len()));
    }
    let w = s[1];
    let mut out = x.clone();
    for (r, &src) in perm.iter().enumerate() {
        for c in cols.clone() {
            out.data_mut()[r * w + c] = x.data()[src * w + c];
        }
    }
    Ok(out)
}

/// Series `(B, N, L)` with steps `steps` of every channel taken from row
/// `perm[b]`.
pub fn permute_time_block(series: &Tensor, steps: &Range<usize>, perm: &[usize]) -> Result<Tensor> {
    let s = series.shape();
    if s.len() != 3 || perm.len() != s[0] || steps.end > s[2] {
        return dim_err(format!("cannot permute steps {steps:?} of {s:?} with {} rows", perm.len()));
    }
    let (n, l) = (s[1], s[2]);
    let mut out = series.clone();
    for (b, &src) in perm.iter().enumerate() {
        for ch in 0..n {
            let dst = (b * n + ch) * l;
            let from = (src * n + ch) * l;
            out.data_mut()[dst + steps.start..dst + steps.end]
                .copy_from_slice(&series.data()[from + steps.start..from + steps.end]);
        }
    }
    Ok(out)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn check_args(rows: usize, repeats: usize) -> Result<()> {
    if rows < 2 {
        return Err(Error::Evaluation("permutation importance needs at least two rows".into()));
    }
    if repeats == 0 {
        return Err(Error::Contract("repeats must be at least 1".into()));
    }
    Ok(())
}

/// Core loop: `score` is evaluated on the data after permuting unit `u`
/// with a generator on stream `u` of `seed`.
fn importance_loop(
    rows: usize,
    units: usize,
    repeats: usize,
    seed: u64,
    sign: f64,
    baseline: f64,
    mut score: impl FnMut(usize, &[usize]) -> Result<f64>,
) -> Result<Vec<(f64, f64)>> {
    (0..units)
        .map(|u| {
            let mut rng = ModelRng::seed_from_u64(seed);
            rng.set_stream(u as u64);
            let drops = (0..repeats)
                .map(|_| {
                    let mut perm: Vec<usize> = (0..rows).collect();
                    perm.shuffle(&mut rng);
                    Ok(sign * (baseline - score(u, &perm)?))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(mean_std(&drops))
        })
        .collect()
}

/// Importance of each column group of `x` for an arbitrary scoring
/// function.
pub fn permutation_importance_with(
    x: &Tensor,
    groups: &[FeatureGroup],
    higher_is_better: bool,
    repeats: usize,
    seed: u64,
    mut score: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<(f64, Vec<ImportanceEntry>)> {
    let rows = x.shape()[0];
    check_args(rows, repeats)?;
    let baseline = score(x)?;
    let sign = if higher_is_better { 1.0 } else { -1.0 };
    let stats = importance_loop(rows, groups.len(), repeats, seed, sign, baseline, |u, perm| {
        score(&permute_columns(x, &groups[u].range, perm)?)
    })?;
    let entries = groups
        .iter()
        .zip(stats)
        .map(|(g, (importance, std))| ImportanceEntry {
            feature: g.name.clone(),
            importance,
            std,
        })
        .collect();
    Ok((baseline, entries))
}

/// Permutation importance of tabular feature groups for a trained model.
pub fn permutation_importance(
    model: &Model,
    data: &Dataset,
    groups: &[FeatureGroup],
    metric: Metric,
    repeats: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    let x = data
        .tabular
        .as_ref()
        .ok_or_else(|| Error::Evaluation("model data has no tabular features".into()))?;
    let (baseline, entries) = permutation_importance_with(x, groups, metric.higher_is_better(), repeats, seed, |t| {
        let mut d = data.clone();
        d.tabular = Some(t.clone());
        metric.score(model, &d)
    })?;
    Ok(ImportanceReport {
        metric: metric.name().into(),
        baseline,
        repeats,
        entries,
    })
}

/// Step ranges of each day patch; entry `d − 1` holds day `d` (1 = last).
pub fn day_blocks(series_len: usize, patch_size: usize, stride: usize) -> Vec<Range<usize>> {
    let t = patch_count(series_len, patch_size, stride);
    (1..=t)
        .map(|d| {
            let start = (t - d) * stride;
            start..start + patch_size
        })
        .collect()
}

/// Step importance for an arbitrary scoring function of the series.
pub fn step_importance_with(
    series: &Tensor,
    patch_size: usize,
    stride: usize,
    higher_is_better: bool,
    repeats: usize,
    seed: u64,
    mut score: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<(f64, Vec<StepEntry>)> {
    let s = series.shape();
    if s.len() != 3 || s[2] < patch_size {
        return dim_err(format!("series {s:?} is shorter than one patch of {patch_size}"));
    }
    check_args(s[0], repeats)?;
    let blocks = day_blocks(s[2], patch_size, stride);
    let baseline = score(series)?;
    let sign = if higher_is_better { 1.0 } else { -1.0 };
    let stats = importance_loop(s[0], blocks.len(), repeats, seed, sign, baseline, |u, perm| {
        score(&permute_time_block(series, &blocks[u], perm)?)
    })?;
    let entries = stats
        .into_iter()
        .enumerate()
        .map(|(i, (importance, std))| StepEntry {
            day_index: i + 1,
            importance,
            std,
        })
        .collect();
    Ok((baseline, entries))
}

pub fn step_importance(model: &Model, data: &Dataset, metric: Metric, repeats: usize, seed: u64) -> Result<StepImportanceReport> {
    let series = data
        .series
        .as_ref()
        .ok_or_else(|| Error::Evaluation("model data has no series".into()))?;
    let (baseline, entries) = step_importance_with(
        series,
        model.config.patch_size,
        model.config.stride,
        metric.higher_is_better(),
        repeats,
        seed,
        |s| {
            let mut d = data.clone();
            d.series = Some(s.clone());
            metric.score(model, &d)
        },
    )?;
    Ok(StepImportanceReport {
        metric: metric.name().into(),
        baseline,
        repeats,
        entries,
    })
}

/// Mean attention per fused column over a dataset.
pub fn mean_attention(model: &Model, data: &Dataset) -> Result<Vec<(String, f64)>> {
    let (_, pred) = evaluate(model, data)?;
    let att = pred
        .attention
        .ok_or_else(|| Error::Evaluation("model has no attention gate".into()))?;
    let w = att.shape()[1];
    let rows = att.shape()[0] as f64;
    let mut means = vec![0.0; w];
    for row in att.data().chunks(w) {
        means.iter_mut().zip(row).for_each(|(m, v)| *m += v / rows);
    }
    Ok(model.fused_labels().into_iter().zip(means).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn groups(names: &[&str]) -> Vec<FeatureGroup> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| FeatureGroup {
                name: n.to_string(),
                range: i..i + 1,
            })
            .collect()
    }

    fn random_rows(n: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ModelRng::seed_from_u64(seed);
        Tensor::from_fn(&[n, w], |_| rng.random_range(-1.0..1.0))
    }

    /// Accuracy of "predict 1 iff column `f` is positive".
    fn column_rule(x: &Tensor, labels: &[usize], f: usize) -> f64 {
        let w = x.shape()[1];
        let hits = x
            .data()
            .chunks(w)
            .zip(labels)
            .filter(|(r, &y)| usize::from(r[f] > 0.0) == y)
            .count();
        hits as f64 / labels.len() as f64
    }

    #[test]
    fn ignored_feature_has_zero_importance() {
        let x = random_rows(50, 3, 1);
        let labels: Vec<usize> = x.data().chunks(3).map(|r| usize::from(r[0] > 0.0)).collect();
        let (base, e) = permutation_importance_with(&x, &groups(&["a", "b", "c"]), true, 3, 7, |t| {
            Ok(column_rule(t, &labels, 0))
        })
        .unwrap();
        assert_eq!(base, 1.0);
        assert_eq!(e[1].importance, 0.0);
        assert_eq!(e[2].importance, 0.0);
    }

    #[test]
    fn signal_feature_dominates_noise() {
        let x = random_rows(400, 2, 2);
        let labels: Vec<usize> = x.data().chunks(2).map(|r| usize::from(r[0] > 0.0)).collect();
        let (_, e) = permutation_importance_with(&x, &groups(&["signal", "noise"]), true, 5, 3, |t| {
            Ok(column_rule(t, &labels, 0))
        })
        .unwrap();
        assert!(e[0].importance > 0.4, "{}", e[0].importance);
        assert!(e[1].importance.abs() <= 0.05);
    }

    #[test]
    fn fixed_seed_reproduces_report() {
        let x = random_rows(30, 2, 4);
        let labels: Vec<usize> = x.data().chunks(2).map(|r| usize::from(r[1] > 0.0)).collect();
        let run = || {
            permutation_importance_with(&x, &groups(&["a", "b"]), true, 3, 11, |t| Ok(column_rule(t, &labels, 1))).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_metrics_flip_sign() {
        let x = random_rows(60, 1, 5);
        let target: Vec<f64> = x.data().to_vec();
        let mse = |t: &Tensor| Ok(t.data().iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
        let (_, e) = permutation_importance_with(&x, &groups(&["a"]), false, 2, 1, mse).unwrap();
        assert!(e[0].importance > 0.0);
    }

    #[test]
    fn constant_column_and_constant_model_are_exactly_zero() {
        let mut x = random_rows(20, 2, 6);
        for r in x.data_mut().chunks_mut(2) {
            r[1] = 3.0;
        }
        let labels: Vec<usize> = x.data().chunks(2).map(|r| usize::from(r[0] > 0.0)).collect();
        let (_, e) = permutation_importance_with(&x, &groups(&["a", "k"]), true, 4, 0, |t| {
            Ok(column_rule(t, &labels, 0) + t.data().chunks(2).map(|r| r[1]).sum::<f64>())
        })
        .unwrap();
        assert_eq!(e[1].importance, 0.0);
        let (_, e) = permutation_importance_with(&x, &groups(&["a", "k"]), true, 4, 0, |_| Ok(0.25)).unwrap();
        assert!(e.iter().all(|e| e.importance == 0.0));
    }

    #[test]
    fn shuffling_preserves_column_multiset() {
        let x = random_rows(15, 3, 7);
        let mut perm: Vec<usize> = (0..15).collect();
        perm.shuffle(&mut ModelRng::seed_from_u64(1));
        let y = permute_columns(&x, &(1..2), &perm).unwrap();
        let col = |t: &Tensor, c: usize| {
            let mut v: Vec<f64> = t.data().chunks(3).map(|r| r[c]).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        assert_eq!(col(&x, 1), col(&y, 1));
        assert_eq!(col(&x, 0), col(&y, 0));
        let unsorted = |t: &Tensor| t.data().chunks(3).map(|r| r[0]).collect::<Vec<_>>();
        assert_eq!(unsorted(&x), unsorted(&y));
    }

    fn day_series(b: usize, days: usize, seed: u64) -> Tensor {
        let mut rng = ModelRng::seed_from_u64(seed);
        Tensor::from_fn(&[b, 2, days * 24], |_| rng.random_range(-1.0..1.0))
    }

    /// Score depending only on the last day's mean of channel 0.
    fn last_day_score(s: &Tensor, labels: &[usize]) -> f64 {
        let l = s.shape()[2];
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(b, &y)| {
                let row = &s.data()[b * 2 * l..b * 2 * l + l];
                let m: f64 = row[l - 24..].iter().sum();
                usize::from(m > 0.0) == y
            })
            .count();
        hits as f64 / labels.len() as f64
    }

    #[test]
    fn day_one_dependence_is_recovered() {
        let s = day_series(200, 10, 8);
        let l = 240;
        let labels: Vec<usize> = (0..200)
            .map(|b| usize::from(s.data()[b * 2 * l + l - 24..b * 2 * l + l].iter().sum::<f64>() > 0.0))
            .collect();
        let (base, e) = step_importance_with(&s, 24, 24, true, 3, 2, |t| Ok(last_day_score(t, &labels))).unwrap();
        assert_eq!(base, 1.0);
        assert_eq!(e.len(), 10);
        assert!(e[0].importance > 0.3);
        assert!(e[1..].iter().all(|x| x.importance == 0.0));
        let report = StepImportanceReport {
            metric: "accuracy".into(),
            baseline: base,
            repeats: 3,
            entries: e,
        };
        assert_eq!(report.most_important_day(), Some(1));
    }

    #[test]
    fn identity_permutation_is_a_no_op() {
        let s = day_series(5, 3, 9);
        let id: Vec<usize> = (0..5).collect();
        for block in day_blocks(72, 24, 24) {
            assert_eq!(permute_time_block(&s, &block, &id).unwrap(), s);
        }
        let x = random_rows(5, 2, 1);
        assert_eq!(permute_columns(&x, &(0..2), &id).unwrap(), x);
    }

    #[test]
    fn day_blocks_count_back_from_the_event() {
        let b = day_blocks(240, 24, 24);
        assert_eq!(b.len(), 10);
        assert_eq!(b[0], 216..240);
        assert_eq!(b[9], 0..24);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let x = random_rows(1, 2, 1);
        assert!(permutation_importance_with(&x, &groups(&["a"]), true, 1, 0, |_| Ok(0.0)).is_err());
        let x = random_rows(4, 2, 1);
        assert!(permutation_importance_with(&x, &groups(&["a"]), true, 0, 0, |_| Ok(0.0)).is_err());
    }
}
