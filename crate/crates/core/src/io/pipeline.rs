//! End-to-end data preparation, training and evaluation driven by a
//! [`RunConfig`].

use serde::{Deserialize, Serialize};

use super::align::{align_windows, Exclusion};
use super::bundle::{ModelBundle, Preprocessing};
use super::config::{DataConfig, EventData, RunConfig, SeriesData};
use super::env::ingest_environment;
use super::events::load_events;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{InputShape, Model, Prediction, Target};
use crate::preprocess::{instance_normalize, SeriesBatch};
use crate::tabular::{fit_imputer, FeatureGroup, ImputeMethod, RawTable, TabularTransform};
use crate::train::{evaluate, forecasting_metrics, split, train, Dataset, MetricsReport, Splits};

/// Event rows that survived window alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSamples {
    /// Clinical columns followed by window statistics.
    pub table: RawTable,
    pub series: Option<Tensor>,
    pub channel_names: Vec<String>,
    pub summary_names: Vec<String>,
    pub labels: Vec<usize>,
    pub admissions: Vec<i64>,
    pub excluded: Vec<Exclusion>,
}

pub fn load_event_samples(data: &EventData) -> Result<EventSamples> {
    let schema = crate::tabular::TabularSchema::new(data.schema.clone())?;
    let events = load_events(
        &data.events,
        &schema,
        &data.admission_column,
        &data.label_column,
        &data.label_classes,
    )?;
    let Some(env_path) = &data.environment else {
        return Ok(EventSamples {
            table: events.table,
            series: None,
            channel_names: Vec::new(),
            summary_names: Vec::new(),
            labels: events.labels,
            admissions: events.admissions,
            excluded: Vec::new(),
        });
    };
    let env = ingest_environment(env_path)?;
    let aligned = align_windows(&events.admissions, &env, data.window_days)?;
    for e in &aligned.excluded {
        log::info!("event row {} excluded: {}", e.event, e.reason);
    }
    if aligned.included.is_empty() {
        return Err(Error::Data("no event has a complete environmental window".into()));
    }
    let mut table = events.table.select(&aligned.included);
    let mut summary_names = Vec::new();
    if data.summary_features {
        table = table.with_numeric_columns(&aligned.summary_names, &aligned.summary)?;
        summary_names = aligned.summary_names.clone();
    }
    Ok(EventSamples {
        table,
        series: aligned.series,
        channel_names: aligned.channel_names,
        summary_names,
        labels: aligned.included.iter().map(|&i| events.labels[i]).collect(),
        admissions: aligned.included.iter().map(|&i| events.admissions[i]).collect(),
        excluded: aligned.excluded,
    })
}

/// Model-ready partitions plus the fitted preprocessing.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub splits: Splits,
    pub preprocessing: Preprocessing,
    pub shape: InputShape,
    /// Encoded tabular columns grouped by original column.
    pub feature_groups: Vec<FeatureGroup>,
    pub excluded: Vec<Exclusion>,
}

/// The clinical columns of `table`: everything before the appended window
/// statistics.
fn clinical_part(table: &RawTable, summary: usize) -> Result<RawTable> {
    let k = table.schema.len().checked_sub(summary).ok_or_else(|| Error::State("fewer columns than window statistics".into()))?;
    let names: Vec<&str> = table.schema.columns[..k].iter().map(|c| c.name.as_str()).collect();
    table.project(&names)
}

/// Writes imputed clinical cells back over the leading columns.
fn merge_clinical(mut table: RawTable, clinical: RawTable) -> RawTable {
    for (row, fill) in table.rows.iter_mut().zip(clinical.rows) {
        let k = fill.len();
        row[..k].clone_from_slice(&fill);
    }
    table
}

/// Imputes and encodes `table` with frozen preprocessing. Imputation sees
/// the clinical columns only; window statistics are computed, never
/// missing, and would swamp the neighbour distances.
pub fn apply_preprocessing(prep: &Preprocessing, table: &RawTable) -> Result<crate::tabular::TabularMatrix> {
    let imputed = match &prep.imputer {
        Some(imp) => {
            let clinical = imp.transform(&clinical_part(table, prep.summary_names.len())?)?;
            merge_clinical(table.clone(), clinical)
        }
        None => table.clone(),
    };
    prep.transform
        .as_ref()
        .ok_or_else(|| Error::State("preprocessing has no fitted transform".into()))?
        .transform(&imputed)
}

/// Splits the samples, fits imputation and encoding on the training rows
/// only (unless `frozen` is given) and builds the three datasets.
pub fn prepare_events(
    cfg: &RunConfig,
    samples: &EventSamples,
    method: ImputeMethod,
    frozen: Option<&Preprocessing>,
) -> Result<Prepared> {
    let DataConfig::Events(data) = &cfg.data else {
        return Err(Error::Contract("event preparation needs event data".into()));
    };
    let n = samples.labels.len();
    let ts = data.temporal_split.then_some(samples.admissions.as_slice());
    let splits = split(n, ts, &cfg.train.split, cfg.train.seed)?;

    let preprocessing = match frozen {
        Some(p) => p.clone(),
        None => {
            let train_rows = samples.table.select(&splits.train);
            let (imputer, clinical) = fit_imputer(method, &clinical_part(&train_rows, samples.summary_names.len())?)?;
            let imputed = merge_clinical(train_rows, clinical);
            Preprocessing {
                transform: Some(TabularTransform::fit(&imputed)?),
                imputer: Some(imputer),
                summary_names: samples.summary_names.clone(),
            }
        }
    };
    let make = |idx: &[usize]| -> Result<(Dataset, Vec<FeatureGroup>)> {
        let m = apply_preprocessing(&preprocessing, &samples.table.select(idx))?;
        let series = samples
            .series
            .as_ref()
            .map(|s| crate::model::select_rows(s, idx))
            .transpose()?;
        Ok((
            Dataset {
                series,
                tabular: Some(m.rows),
                target: Target::Classes(idx.iter().map(|&i| samples.labels[i]).collect()),
            },
            m.groups,
        ))
    };
    let (train, feature_groups) = make(&splits.train)?;
    let (val, _) = make(&splits.val)?;
    let (test, _) = make(&splits.test)?;
    let tab_width = preprocessing.transform.as_ref().map_or(0, TabularTransform::encoded_width);
    Ok(Prepared {
        train,
        val,
        test,
        splits,
        preprocessing,
        shape: InputShape {
            channel_names: samples.channel_names.clone(),
            series_len: if samples.series.is_some() { data.window_days * 24 } else { 0 },
            tab_width,
        },
        feature_groups,
        excluded: samples.excluded.clone(),
    })
}

/// Sliding forecasting windows over one hourly series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindows {
    pub inputs: Tensor,
    pub future: Tensor,
    pub starts: Vec<i64>,
    pub channel_names: Vec<String>,
}

pub fn load_series_windows(data: &SeriesData, horizon: usize) -> Result<SeriesWindows> {
    let env = ingest_environment(&data.path)?;
    let (l, h) = (data.input_len, horizon);
    let n = env.channels.len();
    let mut inputs = Vec::new();
    let mut future = Vec::new();
    let mut starts = Vec::new();
    let mut s = 0;
    while s + l + h <= env.hours() {
        if env.flagged[s..s + l + h].iter().any(|&f| f) {
            s += data.window_stride;
            continue;
        }
        for c in 0..n {
            inputs.extend_from_slice(&env.values[c][s..s + l]);
        }
        for c in 0..n {
            future.extend_from_slice(&env.values[c][s + l..s + l + h]);
        }
        starts.push(env.start + s as i64);
        s += data.window_stride;
    }
    if starts.is_empty() {
        return Err(Error::Data("series too short for a single forecasting window".into()));
    }
    let w = starts.len();
    Ok(SeriesWindows {
        inputs: Tensor::new(vec![w, n, l], inputs)?,
        future: Tensor::new(vec![w, n, h], future)?,
        starts,
        channel_names: env.channels,
    })
}

/// Temporal split of forecasting windows.
pub fn prepare_series(cfg: &RunConfig, windows: &SeriesWindows) -> Result<Prepared> {
    let splits = split(windows.starts.len(), Some(&windows.starts), &cfg.train.split, cfg.train.seed)?;
    let make = |idx: &[usize]| -> Result<Dataset> {
        Ok(Dataset {
            series: Some(crate::model::select_rows(&windows.inputs, idx)?),
            tabular: None,
            target: Target::Future(crate::model::select_rows(&windows.future, idx)?),
        })
    };
    Ok(Prepared {
        train: make(&splits.train)?,
        val: make(&splits.val)?,
        test: make(&splits.test)?,
        splits,
        preprocessing: Preprocessing::default(),
        shape: InputShape {
            channel_names: windows.channel_names.clone(),
            series_len: windows.inputs.shape()[2],
            tab_width: 0,
        },
        feature_groups: Vec::new(),
        excluded: Vec::new(),
    })
}

/// Loads and prepares whatever data the config names.
pub fn prepare(cfg: &RunConfig, frozen: Option<&Preprocessing>) -> Result<Prepared> {
    match &cfg.data {
        DataConfig::Events(e) => {
            let samples = load_event_samples(e)?;
            prepare_events(cfg, &samples, e.imputation, frozen)
        }
        DataConfig::Series(s) => prepare_series(cfg, &load_series_windows(s, cfg.model.horizon)?),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub prepared: Prepared,
    pub test_metrics: MetricsReport,
    pub test_prediction: Prediction,
}

/// Builds, trains and tests a model on already prepared data.
pub fn train_prepared(cfg: &RunConfig, prepared: Prepared) -> Result<TrainOutcome> {
    let mut model = Model::new(cfg.model.clone(), prepared.shape.clone(), cfg.train.seed)?;
    let history = train(&mut model, &prepared.train, &prepared.val, &cfg.train)?;
    let (test_metrics, test_prediction) = evaluate(&model, &prepared.test)?;
    Ok(TrainOutcome {
        bundle: ModelBundle {
            config: cfg.clone(),
            model,
            preprocessing: prepared.preprocessing.clone(),
            history,
        },
        prepared,
        test_metrics,
        test_prediction,
    })
}

pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let prepared = prepare(cfg, None)?;
    train_prepared(cfg, prepared)
}

/// Re-creates the configured test split and evaluates the bundle on it with
/// its frozen preprocessing.
pub fn evaluate_bundle(bundle: &ModelBundle) -> Result<(MetricsReport, Prediction, Prepared)> {
    let prepared = prepare(&bundle.config, Some(&bundle.preprocessing))?;
    let (m, p) = evaluate(&bundle.model, &prepared.test)?;
    Ok((m, p, prepared))
}

/// Forecast that repeats the last observed value, in normalized units.
pub fn persistence_forecast(series: &Tensor, horizon: usize) -> Result<Tensor> {
    let s = series.shape();
    let batch = instance_normalize(&SeriesBatch::new(series.clone(), (0..s[1]).map(|c| c.to_string()).collect())?)?;
    let l = s[2];
    let data = batch
        .values
        .data()
        .chunks(l)
        .flat_map(|row| std::iter::repeat_n(row[l - 1], horizon))
        .collect();
    Tensor::new(vec![s[0], s[1], horizon], data)
}

/// Normalized MSE of the persistence forecast on a forecasting dataset.
pub fn persistence_mse(data: &Dataset) -> Result<f64> {
    let (Some(series), Target::Future(future)) = (&data.series, &data.target) else {
        return Err(Error::Evaluation("persistence needs series inputs and future targets".into()));
    };
    let norm = instance_normalize(&SeriesBatch::new(
        series.clone(),
        (0..series.shape()[1]).map(|c| c.to_string()).collect(),
    )?)?;
    let target = crate::model::normalize_future(future, &norm)?;
    let pred = persistence_forecast(series, future.shape()[2])?;
    Ok(forecasting_metrics(&pred, &target)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub method: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub runs: usize,
}

/// Trains and tests the configured model once per imputation method (and
/// per seed offset), averaging test metrics. Methods run on separate
/// threads.
pub fn sensitivity_imputation(cfg: &RunConfig, methods: &[ImputeMethod], runs: usize) -> Result<Vec<SensitivityRow>> {
    cfg.validate()?;
    let DataConfig::Events(data) = &cfg.data else {
        return Err(Error::Contract("imputation sensitivity needs event data".into()));
    };
    if runs == 0 {
        return Err(Error::Contract("runs must be at least 1".into()));
    }
    let samples = load_event_samples(data)?;
    let results: Vec<Result<SensitivityRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = methods
            .iter()
            .map(|&method| {
                let samples = &samples;
                scope.spawn(move || -> Result<SensitivityRow> {
                    let mut acc = [0.0; 4];
                    let mut auc = Some(0.0);
                    for r in 0..runs {
                        let mut c = cfg.clone();
                        c.train.seed = cfg.train.seed.wrapping_add(r as u64);
                        let prepared = prepare_events(&c, samples, method, None)?;
                        let out = train_prepared(&c, prepared)?;
                        let MetricsReport::Classification(m) = out.test_metrics else {
                            return Err(Error::Evaluation("expected classification metrics".into()));
                        };
                        for (a, v) in acc.iter_mut().zip([m.accuracy, m.precision, m.recall, m.f1]) {
                            *a += v / runs as f64;
                        }
                        auc = auc.zip(m.auc).map(|(a, b)| a + b / runs as f64);
                    }
                    Ok(SensitivityRow {
                        method: method.label().into(),
                        accuracy: acc[0],
                        precision: acc[1],
                        recall: acc[2],
                        f1: acc[3],
                        auc,
                        runs,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("worker thread panicked".into()))))
            .collect()
    });
    results.into_iter().collect()
}

pub fn sensitivity_table(rows: &[SensitivityRow]) -> String {
    let mut s = String::from("method,accuracy,precision,recall,f1,auc,runs\n");
    for r in rows {
        let auc = r.auc.map_or(String::new(), |a| format!("{a:.4}"));
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{auc},{}\n",
            r.method, r.accuracy, r.precision, r.recall, r.f1, r.runs
        ));
    }
    s
}
