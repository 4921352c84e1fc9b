//! Event records: clinical columns, admission time and label.

use std::io::Read;
use std::path::Path;

use super::env::parse_hour;
use crate::error::{Error, Result};
use crate::tabular::{Cell, ColumnKind, RawTable, TabularSchema};

#[derive(Debug, Clone, PartialEq)]
pub struct EventTable {
    pub table: RawTable,
    /// Admission hour (hours since epoch), floored.
    pub admissions: Vec<i64>,
    pub labels: Vec<usize>,
}

fn is_missing(s: &str) -> bool {
    let s = s.trim();
    s.is_empty() || s == "?" || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan")
}

/// Reads events. `label_classes` maps label strings to class indices;
/// without it labels must be non-negative integers.
pub fn read_events(
    reader: impl Read,
    schema: &TabularSchema,
    admission_column: &str,
    label_column: &str,
    label_classes: &[String],
) -> Result<EventTable> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("events CSV has no column `{name}`")))
    };
    let adm_col = find(admission_column)?;
    let label_col = find(label_column)?;
    let cols: Vec<usize> = schema.columns.iter().map(|c| find(&c.name)).collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut admissions = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let ts = field(adm_col);
        admissions.push(
            parse_hour(ts).ok_or_else(|| Error::Data(format!("line {line}: unparseable admission time `{ts}`")))?,
        );
        let raw_label = field(label_col);
        let label = if label_classes.is_empty() {
            raw_label.parse::<usize>().ok()
        } else {
            label_classes.iter().position(|c| c == raw_label)
        }
        .ok_or_else(|| Error::Data(format!("line {line}: invalid label `{raw_label}`")))?;
        labels.push(label);
        let row = schema
            .columns
            .iter()
            .zip(&cols)
            .map(|(spec, &j)| {
                let s = field(j);
                if is_missing(s) {
                    return Ok(Cell::Missing);
                }
                match spec.kind {
                    ColumnKind::Numeric => s.parse::<f64>().ok().filter(|v| v.is_finite()).map(Cell::Num).ok_or_else(|| {
                        Error::Data(format!("line {line}: column `{}` value `{s}` is not a number", spec.name))
                    }),
                    ColumnKind::Categorical => Ok(Cell::Cat(s.to_string())),
                }
            })
            .collect::<Result<Vec<Cell>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("events CSV has no rows".into()));
    }
    Ok(EventTable {
        table: RawTable::new(schema.clone(), rows)?,
        admissions,
        labels,
    })
}

pub fn load_events(
    path: &Path,
    schema: &TabularSchema,
    admission_column: &str,
    label_column: &str,
    label_classes: &[String],
) -> Result<EventTable> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open events file {}: {e}", path.display())))?;
    read_events(f, schema, admission_column, label_column, label_classes)
}
