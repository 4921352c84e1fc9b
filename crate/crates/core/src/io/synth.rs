//! Seeded synthetic datasets.
//!
//! The classification set pairs an hourly pollution record with event rows
//! whose label is `1{z_sbp + z_env > 0}`, where `z_sbp` is a standardized
//! clinical value and `z_env` measures how far the PM10 mean of the second
//! day before admission sits from the window mean. Neither modality alone
//! determines the label.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::env::format_hour;
use crate::error::{Error, Result};
use crate::nn::ModelRng;
use crate::tabular::ColumnSpec;

/// 2016-01-01T00:00:00 in hours since the epoch.
pub const SYNTH_START_HOUR: i64 = 403_224;

pub const ENV_CHANNELS: [&str; 5] = ["PM10", "NO", "NO2", "NOx", "Temp"];
pub const FORECAST_CHANNELS: [&str; 4] = ["PM10", "NO", "NO2", "NOx"];

/// The clinical column that carries the signal.
pub const SIGNAL_FEATURE: &str = "sbp";
/// 1-based day (counting back from admission) that carries the signal.
pub const SIGNAL_DAY: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSynth {
    pub events: usize,
    pub env_days: usize,
    pub window_days: usize,
    /// MCAR probability for each clinical cell.
    pub missing_rate: f64,
    /// Events with `|z_sbp + z_env|` below this are redrawn.
    pub margin: f64,
    /// Events deliberately placed before a full window is available.
    pub early_events: usize,
}

impl Default for ClassificationSynth {
    fn default() -> Self {
        Self {
            events: 3000,
            env_days: 400,
            window_days: 10,
            missing_rate: 0.0,
            margin: 0.1,
            early_events: 5,
        }
    }
}

/// Generated files as CSV text.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationFiles {
    pub environment: String,
    pub events: String,
    pub schema: Vec<ColumnSpec>,
}

fn normal(rng: &mut ModelRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Hourly channels with day-level AR(1) shocks and a diurnal cycle.
fn environment(days: usize, rng: &mut ModelRng) -> Vec<Vec<f64>> {
    let hours = days * 24;
    let mut out = vec![Vec::with_capacity(hours); ENV_CHANNELS.len()];
    let mut level = [0.0f64; 3];
    for d in 0..days {
        for l in level.iter_mut() {
            *l = 0.3 * *l + normal(rng);
        }
        let season = (2.0 * std::f64::consts::PI * d as f64 / 365.0).cos();
        for h in 0..24 {
            let diurnal = (2.0 * std::f64::consts::PI * (h as f64 - 8.0) / 24.0).sin();
            let pm10 = 22.0 + 8.0 * level[0] + 3.0 * diurnal + 2.0 * normal(rng);
            let no = 14.0 + 5.0 * level[1] + 4.0 * diurnal + 1.5 * normal(rng);
            let no2 = 25.0 + 0.6 * no + 4.0 * level[2] + 1.5 * normal(rng);
            let temp = 10.0 - 6.0 * season + 4.0 * diurnal + 1.0 * normal(rng);
            for (c, v) in [pm10, no, no2, no + no2, temp].into_iter().enumerate() {
                out[c].push(v);
            }
        }
    }
    out
}

/// `(mean(day SIGNAL_DAY) − mean(window)) / std(window)` for the PM10
/// window ending just before `offset`.
fn raw_env_signal(pm10: &[f64], offset: usize, window: usize) -> f64 {
    let w = &pm10[offset - window..offset];
    let mean = w.iter().sum::<f64>() / window as f64;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / window as f64).sqrt();
    let day = &w[window - 24 * SIGNAL_DAY..window - 24 * (SIGNAL_DAY - 1)];
    (day.iter().sum::<f64>() / 24.0 - mean) / std
}

pub fn classification_schema() -> Vec<ColumnSpec> {
    vec![
        ColumnSpec::numeric("age"),
        ColumnSpec::numeric("sbp"),
        ColumnSpec::numeric("dbp"),
        ColumnSpec::numeric("heart_rate"),
        ColumnSpec::numeric("bmi"),
        ColumnSpec::numeric("creatinine"),
        ColumnSpec::categorical("sex", &["Male", "Female"]),
        ColumnSpec::categorical("smoking", &["Ex", "Current", "Never"]),
        ColumnSpec::categorical("diabetes", &["Yes", "No"]),
    ]
}

pub fn synth_classification(cfg: &ClassificationSynth, seed: u64) -> Result<ClassificationFiles> {
    let window = cfg.window_days * 24;
    if cfg.env_days <= cfg.window_days + 1 || cfg.events == 0 {
        return Err(Error::Contract("environment must cover more than one window and events > 0".into()));
    }
    if !(0.0..1.0).contains(&cfg.missing_rate) {
        return Err(Error::Contract("missing_rate must lie in [0, 1)".into()));
    }
    let mut rng = ModelRng::seed_from_u64(seed);
    let env = environment(cfg.env_days, &mut rng);
    let hours = cfg.env_days * 24;

    // calibrate the env signal's spread on a fixed grid of offsets
    let probe: Vec<f64> = (window..hours).step_by(7).map(|o| raw_env_signal(&env[0], o, window)).collect();
    let pm = probe.iter().sum::<f64>() / probe.len() as f64;
    let ps = (probe.iter().map(|v| (v - pm).powi(2)).sum::<f64>() / probe.len() as f64).sqrt();

    let mut env_csv = String::from("timestamp");
    for c in ENV_CHANNELS {
        write!(env_csv, ",{c}").expect("string write");
    }
    env_csv.push('\n');
    for h in 0..hours {
        env_csv.push_str(&format_hour(SYNTH_START_HOUR + h as i64));
        for ch in &env {
            write!(env_csv, ",{:.6}", ch[h]).expect("string write");
        }
        env_csv.push('\n');
    }

    let schema = classification_schema();
    let mut ev = String::from("id");
    for c in &schema {
        write!(ev, ",{}", c.name).expect("string write");
    }
    ev.push_str(",admission_time,label\n");
    let mut id = 0;
    let mut write_row = |ev: &mut String, rng: &mut ModelRng, offset: usize, z_sbp: f64, label: usize| {
        // vitals share a loading on z_sbp, as blood pressure tracks age,
        // weight and renal function in real cohorts
        let mut loaded = |r: f64| r * z_sbp + (1.0 - r * r).sqrt() * normal(rng);
        let age = 65.0 + 12.0 * loaded(0.6);
        let dbp = 80.0 + 10.0 * loaded(0.85);
        let hr = 80.0 + 15.0 * loaded(0.4);
        let bmi = 28.0 + 5.0 * loaded(0.6);
        let creat = 90.0 + 20.0 * loaded(0.6);
        let sbp = 135.0 + 20.0 * z_sbp;
        let sex = if rng.random_bool(0.6) { "Male" } else { "Female" };
        let smoking = ["Ex", "Current", "Never"][rng.random_range(0..3)];
        let diabetes = if rng.random_bool(0.25) { "Yes" } else { "No" };
        let cells = [
            format!("{age:.1}"),
            format!("{sbp:.2}"),
            format!("{dbp:.2}"),
            format!("{hr:.0}"),
            format!("{bmi:.1}"),
            format!("{creat:.1}"),
            sex.to_string(),
            smoking.to_string(),
            diabetes.to_string(),
        ];
        write!(ev, "{id}").expect("string write");
        for c in cells {
            if rng.random::<f64>() < cfg.missing_rate {
                ev.push(',');
            } else {
                write!(ev, ",{c}").expect("string write");
            }
        }
        let minute = rng.random_range(0..60);
        let ts = format_hour(SYNTH_START_HOUR + offset as i64);
        writeln!(ev, ",{}:{minute:02}:00,{label}", &ts[..13]).expect("string write");
        id += 1;
    };

    for _ in 0..cfg.early_events.min(cfg.events) {
        let offset = rng.random_range(0..window);
        let z = normal(&mut rng);
        write_row(&mut ev, &mut rng, offset, z, usize::from(z > 0.0));
    }
    for _ in cfg.early_events.min(cfg.events)..cfg.events {
        loop {
            let offset = rng.random_range(window..=hours);
            let z_env = (raw_env_signal(&env[0], offset, window) - pm) / ps;
            let z_sbp = normal(&mut rng);
            let s = z_sbp + z_env;
            if s.abs() < cfg.margin {
                continue;
            }
            write_row(&mut ev, &mut rng, offset, z_sbp, usize::from(s > 0.0));
            break;
        }
    }
    Ok(ClassificationFiles {
        environment: env_csv,
        events: ev,
        schema,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastSynth {
    pub days: usize,
}

impl Default for ForecastSynth {
    fn default() -> Self {
        Self { days: 120 }
    }
}

/// Four channels, each an AR(2) process around a channel-specific 24-hour
/// profile, as `timestamp,<channel>...` CSV.
pub fn synth_forecasting(cfg: &ForecastSynth, seed: u64) -> Result<String> {
    if cfg.days < 3 {
        return Err(Error::Contract("need at least three days".into()));
    }
    let mut rng = ModelRng::seed_from_u64(seed);
    let hours = cfg.days * 24;
    let n = FORECAST_CHANNELS.len();
    let profiles: Vec<[f64; 24]> = (0..n)
        .map(|c| {
            let phase = rng.random_range(0.0..24.0);
            let amp = 3.0 + c as f64;
            std::array::from_fn(|h| {
                let x = 2.0 * std::f64::consts::PI * (h as f64 - phase) / 24.0;
                amp * (x.sin() + 0.4 * (2.0 * x).cos())
            })
        })
        .collect();
    let mut series = vec![vec![0.0; hours]; n];
    for (c, s) in series.iter_mut().enumerate() {
        let (mut a1, mut a2) = (0.0, 0.0);
        let base = 20.0 + 5.0 * c as f64;
        for (h, slot) in s.iter_mut().enumerate() {
            let a = 0.6 * a1 + 0.3 * a2 + normal(&mut rng);
            a2 = a1;
            a1 = a;
            *slot = base + profiles[c][h % 24] + a;
        }
    }
    let mut out = String::from("timestamp");
    for c in FORECAST_CHANNELS {
        write!(out, ",{c}").expect("string write");
    }
    out.push('\n');
    for h in 0..hours {
        out.push_str(&format_hour(SYNTH_START_HOUR + h as i64));
        for s in &series {
            write!(out, ",{:.6}", s[h]).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}
