//! Extraction of the environmental window preceding each event.

use serde::{Deserialize, Serialize};

use super::env::{format_hour, EnvTable};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    /// Row of the event in the input order.
    pub event: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `(E, N, window_days·24)` for the included events, in input order.
    pub series: Option<Tensor>,
    pub channel_names: Vec<String>,
    pub summary_names: Vec<String>,
    /// One row of summary statistics per included event.
    pub summary: Vec<Vec<f64>>,
    pub included: Vec<usize>,
    pub excluded: Vec<Exclusion>,
}

fn is_temperature(name: &str) -> bool {
    name.to_ascii_lowercase().starts_with("temp")
}

/// Two statistics per channel: mean and max, or mean and min for
/// temperature channels.
pub fn summary_names(channels: &[String]) -> Vec<String> {
    channels
        .iter()
        .flat_map(|c| {
            let second = if is_temperature(c) { "min" } else { "max" };
            [format!("{c}_avg"), format!("{c}_{second}")]
        })
        .collect()
}

fn summarize(channels: &[String], window: &[&[f64]]) -> Vec<f64> {
    channels
        .iter()
        .zip(window)
        .flat_map(|(c, w)| {
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let ext = if is_temperature(c) {
                w.iter().copied().fold(f64::INFINITY, f64::min)
            } else {
                w.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            [mean, ext]
        })
        .collect()
}

/// For each admission hour `h` takes hours `[h − 24·window_days, h)`.
/// Events whose window leaves the table or touches a flagged hour are
/// excluded with a reason.
pub fn align_windows(admissions: &[i64], env: &EnvTable, window_days: usize) -> Result<Alignment> {
    if window_days == 0 {
        return Err(Error::Contract("window_days must be at least 1".into()));
    }
    let len = window_days * 24;
    let n = env.channels.len();
    let mut data = Vec::new();
    let mut summary = Vec::new();
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for (i, &h) in admissions.iter().enumerate() {
        let from = h - len as i64;
        let reason = if from < env.start {
            Some(format!(
                "window starts {} before environment coverage begins at {}",
                format_hour(from),
                format_hour(env.start)
            ))
        } else if h > env.end() {
            Some(format!(
                "window ends at {} after environment coverage ends at {}",
                format_hour(h),
                format_hour(env.end())
            ))
        } else {
            let off = (from - env.start) as usize;
            env.flagged[off..off + len]
                .iter()
                .position(|&f| f)
                .map(|k| format!("window contains an unfilled gap at {}", format_hour(from + k as i64)))
        };
        if let Some(reason) = reason {
            excluded.push(Exclusion { event: i, reason });
            continue;
        }
        let off = (from - env.start) as usize;
        let window: Vec<&[f64]> = env.values.iter().map(|v| &v[off..off + len]).collect();
        for w in &window {
            data.extend_from_slice(w);
        }
        summary.push(summarize(&env.channels, &window));
        included.push(i);
    }
    let series = if included.is_empty() {
        None
    } else {
        Some(Tensor::new(vec![included.len(), n, len], data)?)
    };
    Ok(Alignment {
        series,
        channel_names: env.channels.clone(),
        summary_names: summary_names(&env.channels),
        summary,
        included,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::env::parse_hour;
    use proptest::prelude::*;

    fn ramp_env(days: usize) -> EnvTable {
        let start = parse_hour("2016-01-01T00:00").unwrap();
        let hours = days * 24;
        EnvTable::from_values(
            start,
            vec!["PM10".into(), "Temp".into()],
            vec![
                (0..hours).map(|h| (start + h as i64) as f64).collect(),
                (0..hours).map(|h| -(h as f64)).collect(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn ten_day_window_has_240_steps_before_admission() {
        let env = ramp_env(20);
        let h = env.start + 300;
        let a = align_windows(&[h], &env, 10).unwrap();
        let s = a.series.unwrap();
        assert_eq!(s.shape(), &[1, 2, 240]);
        // channel 0 stores the absolute hour, so the window is [h − 240, h)
        assert_eq!(s.data()[0], (h - 240) as f64);
        assert_eq!(s.data()[239], (h - 1) as f64);
    }

    #[test]
    fn first_day_event_is_excluded() {
        let env = ramp_env(20);
        let a = align_windows(&[env.start + 5, env.start + 400], &env, 10).unwrap();
        assert_eq!(a.included, vec![1]);
        assert_eq!(a.excluded.len(), 1);
        assert!(a.excluded[0].reason.contains("before environment coverage"));
    }

    #[test]
    fn summary_statistics_follow_channel_kind() {
        let env = ramp_env(5);
        let h = env.start + 48;
        let a = align_windows(&[h], &env, 1).unwrap();
        assert_eq!(a.summary_names, vec!["PM10_avg", "PM10_max", "Temp_avg", "Temp_min"]);
        let s = &a.summary[0];
        assert_eq!(s[1], (h - 1) as f64);
        assert_eq!(s[3], -47.0);
        assert_eq!(s[2], -(24..48).sum::<i64>() as f64 / 24.0);
    }

    #[test]
    fn flagged_hours_exclude_windows() {
        let mut env = ramp_env(10);
        env.flagged[100] = true;
        let a = align_windows(&[env.start + 110, env.start + 140], &env, 1).unwrap();
        assert_eq!(a.included, vec![1]);
        assert!(a.excluded[0].reason.contains("gap"));
    }

    proptest! {
        #[test]
        fn no_future_leakage_and_complete_accounting(offsets in proptest::collection::vec(0i64..600, 1..30), days in 1usize..6) {
            let env = ramp_env(20);
            let adm: Vec<i64> = offsets.iter().map(|o| env.start + o).collect();
            let a = align_windows(&adm, &env, days).unwrap();
            prop_assert_eq!(a.included.len() + a.excluded.len(), adm.len());
            if let Some(s) = a.series {
                let l = days * 24;
                for (row, &ev) in a.included.iter().enumerate() {
                    let w = &s.data()[row * 2 * l..row * 2 * l + l];
                    prop_assert!(w.iter().all(|&t| (t as i64) < adm[ev]));
                }
            }
        }
    }
}
