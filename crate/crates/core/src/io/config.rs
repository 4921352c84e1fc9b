//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpret::{Metric, DEFAULT_REPEATS};
use crate::model::{ModelConfig, ModelKind};
use crate::tabular::{ColumnSpec, ImputeMethod, TabularSchema};
use crate::train::{Task, TrainConfig};

fn default_admission() -> String {
    "admission_time".into()
}

fn default_label() -> String {
    "label".into()
}

fn default_window_days() -> usize {
    10
}

fn yes() -> bool {
    true
}

fn default_input_len() -> usize {
    240
}

fn default_window_stride() -> usize {
    24
}

/// Event records with optional environmental series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventData {
    pub events: PathBuf,
    #[serde(default)]
    pub environment: Option<PathBuf>,
    pub schema: Vec<ColumnSpec>,
    #[serde(default = "default_admission")]
    pub admission_column: String,
    #[serde(default = "default_label")]
    pub label_column: String,
    /// Label strings in class order; integer labels when empty.
    #[serde(default)]
    pub label_classes: Vec<String>,
    #[serde(default = "default_window_days")]
    pub window_days: usize,
    #[serde(default)]
    pub imputation: ImputeMethod,
    /// Split by admission time instead of a seeded shuffle.
    #[serde(default = "yes")]
    pub temporal_split: bool,
    /// Append window statistics of every channel to the tabular columns.
    #[serde(default = "yes")]
    pub summary_features: bool,
}

/// A single multivariate hourly series cut into forecasting windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesData {
    pub path: PathBuf,
    #[serde(default = "default_input_len")]
    pub input_len: usize,
    /// Hours between the starts of consecutive windows.
    #[serde(default = "default_window_stride")]
    pub window_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Events(EventData),
    Series(SeriesData),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpretConfig {
    pub metric: Metric,
    pub repeats: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Accuracy,
            repeats: DEFAULT_REPEATS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub interpret: InterpretConfig,
}

impl RunConfig {
    /// Reads a config and resolves its data paths against the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataConfig::Events(e) => {
                fix(&mut e.events);
                if let Some(env) = e.environment.as_mut() {
                    fix(env);
                }
            }
            DataConfig::Series(s) => fix(&mut s.path),
        }
    }

    pub fn schema(&self) -> Result<TabularSchema> {
        match &self.data {
            DataConfig::Events(e) => TabularSchema::new(e.schema.clone()),
            DataConfig::Series(_) => Ok(TabularSchema::default()),
        }
    }

    /// Hours of series each sample feeds the encoder.
    pub fn series_len(&self) -> usize {
        match &self.data {
            DataConfig::Events(e) => e.window_days * 24,
            DataConfig::Series(s) => s.input_len,
        }
    }

    pub fn set_window_days(&mut self, days: usize) -> Result<()> {
        match &mut self.data {
            DataConfig::Events(e) => {
                e.window_days = days;
                Ok(())
            }
            DataConfig::Series(_) => Err(Error::Contract("--window-days applies to event data only".into())),
        }
    }

    /// Checks internal consistency and that every data path exists.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.interpret.repeats == 0 {
            return Err(Error::Contract("interpret.repeats must be at least 1".into()));
        }
        let forecasting = self.train.task == Task::Forecasting;
        if forecasting != self.model.kind.is_forecaster() {
            return Err(Error::Contract(format!(
                "task {:?} does not match model kind {:?}",
                self.train.task, self.model.kind
            )));
        }
        let exists = |p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Data(format!("path {} does not exist", p.display())))
            }
        };
        match &self.data {
            DataConfig::Events(e) => {
                if forecasting {
                    return Err(Error::Contract("forecasting needs `series` data".into()));
                }
                TabularSchema::new(e.schema.clone())?;
                exists(&e.events)?;
                match &e.environment {
                    Some(p) => exists(p)?,
                    None if self.model.kind.uses_series() => {
                        return Err(Error::Contract(format!(
                            "{:?} model needs an environment file",
                            self.model.kind
                        )))
                    }
                    None => {}
                }
                if e.window_days == 0 {
                    return Err(Error::Contract("window_days must be at least 1".into()));
                }
                if self.model.kind.uses_series() && e.window_days * 24 < self.model.patch_size {
                    return Err(Error::Contract("window shorter than one patch".into()));
                }
            }
            DataConfig::Series(s) => {
                if self.model.kind != ModelKind::Forecaster {
                    return Err(Error::Contract("series data is for forecasting models".into()));
                }
                exists(&s.path)?;
                if s.input_len < self.model.patch_size || s.window_stride == 0 {
                    return Err(Error::Contract("input_len must cover a patch and window_stride must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("events.csv"), "x").unwrap();
        std::fs::write(dir.path().join("env.csv"), "x").unwrap();
        let json = r#"{
            "model": {"kind": "tabula_time"},
            "data": {"kind": "events", "events": "events.csv", "environment": "env.csv",
                     "schema": [{"name": "age", "kind": "numeric"}]}
        }"#;
        let path = dir.path().join("run.json");
        std::fs::write(&path, json).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.model.tab_dim, 31);
        assert_eq!(cfg.series_len(), 240);
        let DataConfig::Events(e) = &cfg.data else { panic!() };
        assert_eq!(e.events, dir.path().join("events.csv"));
        assert_eq!(e.imputation, ImputeMethod::Knn { k: 5 });

        let back: RunConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_paths_and_mismatched_tasks_fail_validation() {
        let mut cfg = RunConfig {
            model: ModelConfig::new(ModelKind::TabularOnly),
            train: TrainConfig::default(),
            data: DataConfig::Events(EventData {
                events: "/nonexistent/events.csv".into(),
                environment: None,
                schema: vec![ColumnSpec::numeric("a")],
                admission_column: default_admission(),
                label_column: default_label(),
                label_classes: vec![],
                window_days: 10,
                imputation: ImputeMethod::Mean,
                temporal_split: true,
                summary_features: true,
            }),
            interpret: InterpretConfig::default(),
        };
        assert!(matches!(cfg.validate(), Err(Error::Data(_))));
        cfg.train.task = Task::Forecasting;
        assert!(matches!(cfg.validate(), Err(Error::Contract(_))));
    }
}
