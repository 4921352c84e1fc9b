//! Hourly environmental series: CSV ingest and gap audit.

use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest run of missing hours that is filled by linear interpolation.
pub const MAX_INTERPOLATED_GAP: usize = 3;

const FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H",
    "%Y-%m-%d %H",
];

/// Parses an ISO-8601 timestamp (offsets are converted to UTC) into whole
/// hours since the Unix epoch, flooring partial hours.
pub fn parse_hour(s: &str) -> Option<i64> {
    let s = s.trim();
    let t = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        dt.naive_utc()
    } else {
        let plain = s.strip_suffix('Z').unwrap_or(s);
        FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(plain, f).ok()).or_else(|| {
            // chrono needs minutes in the pattern
            FORMATS[4..]
                .iter()
                .find_map(|f| NaiveDateTime::parse_from_str(&format!("{plain}:00"), &format!("{f}:%M")).ok())
        })?
    };
    Some(t.and_utc().timestamp().div_euclid(3600))
}

/// `true` when the timestamp sits exactly on an hour boundary.
fn on_the_hour(s: &str) -> bool {
    let s = s.trim();
    let plain = s.strip_suffix('Z').unwrap_or(s);
    let t = DateTime::parse_from_rfc3339(s)
        .map(|d| d.naive_utc())
        .ok()
        .or_else(|| FORMATS[..4].iter().find_map(|f| NaiveDateTime::parse_from_str(plain, f).ok()));
    t.is_none_or(|t| t.minute() == 0 && t.second() == 0)
}

pub fn format_hour(hour: i64) -> String {
    DateTime::from_timestamp(hour * 3600, 0)
        .map(|d| d.naive_utc().format("%Y-%m-%dT%H:%M:%S").to_string())
        .unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub channel: usize,
    /// First missing hour (hours since epoch).
    pub start: i64,
    pub hours: usize,
    pub interpolated: bool,
}

/// Regular hourly grid from `start` with one value vector per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvTable {
    pub start: i64,
    pub channels: Vec<String>,
    /// `values[channel][hour offset]`; NaN where a gap was not filled.
    pub values: Vec<Vec<f64>>,
    /// Hours that cannot feed any window.
    pub flagged: Vec<bool>,
    pub gaps: Vec<Gap>,
}

impl EnvTable {
    pub fn hours(&self) -> usize {
        self.flagged.len()
    }

    pub fn end(&self) -> i64 {
        self.start + self.hours() as i64
    }

    /// Builds a table from a gap-free grid.
    pub fn from_values(start: i64, channels: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let hours = values.first().map_or(0, Vec::len);
        if values.len() != channels.len() || values.iter().any(|v| v.len() != hours) || hours == 0 {
            return Err(Error::Data("channel values must be non-empty and equally long".into()));
        }
        Ok(Self {
            start,
            channels,
            values,
            flagged: vec![false; hours],
            gaps: Vec::new(),
        })
    }

    pub fn interpolated_hours(&self) -> usize {
        self.gaps.iter().filter(|g| g.interpolated).map(|g| g.hours).sum()
    }

    pub fn flagged_hours(&self) -> usize {
        self.flagged.iter().filter(|&&f| f).count()
    }
}

fn parse_value(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads `timestamp,<channel>...` CSV text.
pub fn read_environment(reader: impl Read) -> Result<EnvTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 || !header[0].eq_ignore_ascii_case("timestamp") {
        return Err(Error::Data("environment CSV must start with `timestamp,<channel>...`".into()));
    }
    let channels: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut rows: Vec<(i64, usize, Vec<Option<f64>>)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let ts = rec.get(0).unwrap_or("");
        let hour = parse_hour(ts).ok_or_else(|| Error::Data(format!("line {line}: unparseable timestamp `{ts}`")))?;
        if !on_the_hour(ts) {
            return Err(Error::Data(format!("line {line}: timestamp `{ts}` is not on the hour")));
        }
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "line {line}: {} fields, header has {}",
                rec.len(),
                header.len()
            )));
        }
        let vals = rec.iter().skip(1).map(parse_value).collect();
        rows.push((hour, line, vals));
    }
    if rows.is_empty() {
        return Err(Error::Data("environment CSV has no rows".into()));
    }
    rows.sort_by_key(|r| (r.0, r.1));
    for w in rows.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::Data(format!(
                "line {}: duplicate timestamp {} (first seen on line {})",
                w[1].1.max(w[0].1),
                format_hour(w[1].0),
                w[1].1.min(w[0].1)
            )));
        }
    }
    let start = rows[0].0;
    let hours = (rows[rows.len() - 1].0 - start + 1) as usize;
    let mut grid: Vec<Vec<Option<f64>>> = vec![vec![None; hours]; channels.len()];
    for (hour, _, vals) in rows {
        let h = (hour - start) as usize;
        for (c, v) in vals.into_iter().enumerate() {
            grid[c][h] = v;
        }
    }
    Ok(audit(start, channels, grid))
}

pub fn ingest_environment(path: &Path) -> Result<EnvTable> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open environment file {}: {e}", path.display())))?;
    read_environment(f)
}

/// Interpolates short interior gaps and flags everything else.
fn audit(start: i64, channels: Vec<String>, grid: Vec<Vec<Option<f64>>>) -> EnvTable {
    let hours = grid.first().map_or(0, Vec::len);
    let mut flagged = vec![false; hours];
    let mut gaps = Vec::new();
    let mut values = Vec::with_capacity(grid.len());
    for (c, col) in grid.into_iter().enumerate() {
        let mut out: Vec<f64> = col.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let mut h = 0;
        while h < hours {
            if col[h].is_some() {
                h += 1;
                continue;
            }
            let from = h;
            while h < hours && col[h].is_none() {
                h += 1;
            }
            let len = h - from;
            let bounded = from > 0 && h < hours;
            let interpolated = bounded && len <= MAX_INTERPOLATED_GAP;
            if interpolated {
                let (a, b) = (out[from - 1], out[h]);
                for (k, slot) in out[from..h].iter_mut().enumerate() {
                    let frac = (k + 1) as f64 / (len + 1) as f64;
                    *slot = a + (b - a) * frac;
                }
            } else {
                flagged[from..h].iter_mut().for_each(|f| *f = true);
            }
            gaps.push(Gap {
                channel: c,
                start: start + from as i64,
                hours: len,
                interpolated,
            });
        }
        values.push(out);
    }
    if gaps.iter().any(|g| !g.interpolated) {
        log::warn!(
            "{} environment gaps longer than {MAX_INTERPOLATED_GAP} h or unbounded; affected windows are excluded",
            gaps.iter().filter(|g| !g.interpolated).count()
        );
    }
    EnvTable {
        start,
        channels,
        values,
        flagged,
        gaps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_of(lines: &[String]) -> EnvTable {
        read_environment(lines.join("\n").as_bytes()).unwrap()
    }

    #[test]
    fn two_complete_days_have_48_rows() {
        let mut lines = vec!["timestamp,PM10,NO,NO2,NOx,Temp".to_string()];
        for d in 1..=2 {
            for h in 0..24 {
                lines.push(format!("2016-01-0{d}T{h:02}:00:00,1,2,3,4,5"));
            }
        }
        let t = csv_of(&lines);
        assert_eq!(t.channels.len(), 5);
        assert_eq!(t.hours(), 48);
        assert!(t.gaps.is_empty());
        assert_eq!(format_hour(t.start), "2016-01-01T00:00:00");
    }

    #[test]
    fn single_missing_hour_is_the_midpoint() {
        let t = csv_of(&[
            "timestamp,PM10".into(),
            "2016-01-01T10:00,10".into(),
            "2016-01-01T12:00,12".into(),
        ]);
        assert_eq!(t.values[0], vec![10.0, 11.0, 12.0]);
        assert_eq!(t.interpolated_hours(), 1);
        assert_eq!(t.flagged_hours(), 0);
    }

    #[test]
    fn long_gaps_are_flagged_not_filled() {
        let mut lines = vec!["timestamp,a,b".to_string()];
        for h in 0..10 {
            let a = if (3..7).contains(&h) { String::new() } else { h.to_string() };
            lines.push(format!("2016-03-01 {h:02}:00,{a},1"));
        }
        let t = csv_of(&lines);
        assert_eq!(t.flagged_hours(), 4);
        assert!(t.values[0][4].is_nan());
        assert!(!t.gaps[0].interpolated);
    }

    #[test]
    fn three_hour_gap_is_interpolated() {
        let t = csv_of(&[
            "timestamp,a".into(),
            "2016-01-01T00,0".into(),
            "2016-01-01T04,8".into(),
        ]);
        assert_eq!(t.values[0], vec![0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn rows_are_sorted() {
        let t = csv_of(&[
            "timestamp,a".into(),
            "2016-01-01T02:00:00Z,3".into(),
            "2016-01-01T00:00:00Z,1".into(),
            "2016-01-01T01:00:00Z,2".into(),
        ]);
        assert_eq!(t.values[0], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn duplicate_and_bad_timestamps_report_lines() {
        let e = read_environment("timestamp,a\n2016-01-01T00:00,1\n2016-01-01T01:00,1\n2016-01-01T00:00,2\n".as_bytes())
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 4") && e.contains("duplicate"), "{e}");
        let e = read_environment("timestamp,a\n2016-01-01T00:00,1\nyesterday,2\n".as_bytes())
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 3"), "{e}");
        let e = read_environment("timestamp,a\n2016-01-01T00:30,1\n".as_bytes()).unwrap_err().to_string();
        assert!(e.contains("not on the hour"), "{e}");
    }

    #[test]
    fn timestamp_formats_agree() {
        let h = parse_hour("2016-01-01T05:00:00").unwrap();
        for s in ["2016-01-01 05:00", "2016-01-01T05", "2016-01-01T05:00:00Z", "2016-01-01T06:00:00+01:00"] {
            assert_eq!(parse_hour(s), Some(h), "{s}");
        }
        assert_eq!(parse_hour("2016-01-01T05:59:00"), Some(h));
        assert_eq!(parse_hour("nonsense"), None);
    }
}
