//! One-hot encoding and standardization of imputed clinical rows.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Cell, ColumnKind, RawTable, TabularSchema};
use crate::autodiff::Tensor;
use crate::error::{dim_err, Error, Result};

/// Encoded columns that came from one original column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub range: Range<usize>,
}

/// Fully numeric rows `(B, F_enc)` ready for the embedding MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMatrix {
    pub rows: Tensor,
    pub column_names: Vec<String>,
    pub groups: Vec<FeatureGroup>,
}

impl TabularMatrix {
    pub fn batch(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn select(&self, idx: &[usize]) -> TabularMatrix {
        let w = self.width();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&self.rows.data()[i * w..(i + 1) * w]);
        }
        TabularMatrix {
            rows: Tensor::new(vec![idx.len(), w], data).expect("selection keeps width"),
            column_names: self.column_names.clone(),
            groups: self.groups.clone(),
        }
    }
}

/// Expands categorical columns into indicator columns using the category
/// order stored in the schema. Numeric columns pass through.
pub fn encode_onehot(table: &RawTable) -> Result<TabularMatrix> {
    if table.rows.is_empty() {
        return dim_err("cannot encode an empty table");
    }
    let schema = &table.schema;
    let mut column_names = Vec::new();
    let mut groups = Vec::new();
    for col in &schema.columns {
        let start = column_names.len();
        match col.kind {
            ColumnKind::Numeric => column_names.push(col.name.clone()),
            ColumnKind::Categorical => {
                if col.categories.is_empty() {
                    return Err(Error::Contract(format!(
                        "categorical column `{}` has no fitted categories",
                        col.name
                    )));
                }
                column_names.extend(col.categories.iter().map(|c| format!("{}={c}", col.name)));
            }
        }
        groups.push(FeatureGroup {
            name: col.name.clone(),
            range: start..column_names.len(),
        });
    }
    let width = column_names.len();
    let mut data = vec![0.0; table.rows.len() * width];
    for (r, row) in table.rows.iter().enumerate() {
        let out = &mut data[r * width..(r + 1) * width];
        for ((cell, col), group) in row.iter().zip(&schema.columns).zip(&groups) {
            match (cell, col.kind) {
                (Cell::Num(v), ColumnKind::Numeric) => out[group.range.start] = *v,
                (Cell::Cat(s), ColumnKind::Categorical) => {
                    let k = col.categories.iter().position(|c| c == s).ok_or_else(|| {
                        Error::Data(format!("column `{}`: unseen category `{s}`", col.name))
                    })?;
                    out[group.range.start + k] = 1.0;
                }
                (Cell::Missing, _) => {
                    return Err(Error::Data(format!(
                        "row {r}: column `{}` is missing; impute before encoding",
                        col.name
                    )))
                }
                _ => return Err(Error::Data(format!("row {r}: cell kind mismatch in `{}`", col.name))),
            }
        }
    }
    Ok(TabularMatrix {
        rows: Tensor::new(vec![table.rows.len(), width], data)?,
        column_names,
        groups,
    })
}

/// Category lists and numeric moments fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularTransform {
    pub schema: TabularSchema,
    /// `(encoded column, mean, std)` for every numeric column.
    pub moments: Vec<(usize, f64, f64)>,
}

impl TabularTransform {
    /// Fits on an imputed table. Categorical columns without a declared
    /// category list take the sorted set of observed values.
    pub fn fit(train: &RawTable) -> Result<Self> {
        let mut schema = train.schema.clone();
        for (j, col) in schema.columns.iter_mut().enumerate() {
            if col.kind == ColumnKind::Categorical && col.categories.is_empty() {
                let seen: BTreeSet<&str> = train
                    .rows
                    .iter()
                    .filter_map(|r| match &r[j] {
                        Cell::Cat(s) => Some(s.as_str()),
                        _ => None,
                    })
                    .collect();
                col.categories = seen.into_iter().map(String::from).collect();
            }
        }
        let raw = encode_onehot(&RawTable {
            schema: schema.clone(),
            rows: train.rows.clone(),
        })?;
        let width = raw.width();
        let n = raw.batch() as f64;
        let moments = schema
            .columns
            .iter()
            .zip(&raw.groups)
            .filter(|(c, _)| c.kind == ColumnKind::Numeric)
            .map(|(_, g)| {
                let j = g.range.start;
                let col = raw.rows.data().iter().skip(j).step_by(width);
                let mean = col.clone().sum::<f64>() / n;
                let std = (col.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                (j, mean, if std > 1e-12 { std } else { 1.0 })
            })
            .collect();
        Ok(Self { schema, moments })
    }

    pub fn encoded_width(&self) -> usize {
        self.schema
            .columns
            .iter()
            .map(|c| match c.kind {
                ColumnKind::Numeric => 1,
                ColumnKind::Categorical => c.categories.len(),
            })
            .sum()
    }

    /// Encodes and standardizes with the frozen statistics.
    pub fn transform(&self, table: &RawTable) -> Result<TabularMatrix> {
        if table.schema.columns.iter().map(|c| (&c.name, c.kind)).ne(self.schema.columns.iter().map(|c| (&c.name, c.kind))) {
            return dim_err("table columns differ from the fitted schema");
        }
        let mut m = encode_onehot(&RawTable {
            schema: self.schema.clone(),
            rows: table.rows.clone(),
        })?;
        let width = m.width();
        for row in m.rows.data_mut().chunks_mut(width) {
            for &(j, mean, std) in &self.moments {
                row[j] = (row[j] - mean) / std;
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::ColumnSpec;

    fn cat(s: &str) -> Cell {
        Cell::Cat(s.into())
    }

    #[test]
    fn smoking_never_is_third_indicator() {
        let schema = TabularSchema::new(vec![ColumnSpec::categorical("Smoking", &["Ex", "Current", "Never"])]).unwrap();
        let t = RawTable::new(schema, vec![vec![cat("Never")]]).unwrap();
        let m = encode_onehot(&t).unwrap();
        assert_eq!(m.rows.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn yes_no_indicator() {
        let schema = TabularSchema::new(vec![ColumnSpec::categorical("Diabetes", &["Yes", "No"])]).unwrap();
        let t = RawTable::new(schema, vec![vec![cat("Yes")]]).unwrap();
        assert_eq!(encode_onehot(&t).unwrap().rows.data(), &[1.0, 0.0]);
    }

    #[test]
    fn numeric_schema_passes_through() {
        let schema = TabularSchema::new(vec![ColumnSpec::numeric("a"), ColumnSpec::numeric("b")]).unwrap();
        let t = RawTable::new(schema, vec![vec![Cell::Num(1.5), Cell::Num(-2.0)], vec![Cell::Num(3.0), Cell::Num(0.0)]]).unwrap();
        assert_eq!(encode_onehot(&t).unwrap().rows.data(), &[1.5, -2.0, 3.0, 0.0]);
    }

    #[test]
    fn unseen_category_names_column_and_value() {
        let schema = TabularSchema::new(vec![ColumnSpec::categorical("Sex", &["M", "F"])]).unwrap();
        let t = RawTable::new(schema, vec![vec![cat("X")]]).unwrap();
        let msg = encode_onehot(&t).unwrap_err().to_string();
        assert!(msg.contains("Sex") && msg.contains("X"), "{msg}");
    }

    #[test]
    fn fitted_moments_standardize_train_and_freeze_for_test() {
        let schema = TabularSchema::new(vec![ColumnSpec::numeric("age"), ColumnSpec::categorical("s", &[])]).unwrap();
        let rows: Vec<Vec<Cell>> = (0..9)
            .map(|i| vec![Cell::Num(40.0 + 3.0 * i as f64), cat(if i % 2 == 0 { "b" } else { "a" })])
            .collect();
        let train = RawTable::new(schema.clone(), rows).unwrap();
        let tf = TabularTransform::fit(&train).unwrap();
        assert_eq!(tf.schema.columns[1].categories, vec!["a", "b"]);
        assert_eq!(tf.encoded_width(), 3);
        let m = tf.transform(&train).unwrap();
        let age: Vec<f64> = m.rows.data().chunks(3).map(|r| r[0]).collect();
        let mean = age.iter().sum::<f64>() / 9.0;
        let std = (age.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        for r in m.rows.data().chunks(3) {
            assert_eq!(r[1] + r[2], 1.0);
        }

        // test row uses training moments, not its own
        let test = RawTable::new(schema, vec![vec![Cell::Num(52.0), cat("a")]]).unwrap();
        let t = tf.transform(&test).unwrap();
        let (_, mu, sd) = tf.moments[0];
        assert_eq!(t.rows.data()[0], (52.0 - mu) / sd);
    }

    #[test]
    fn missing_cell_is_rejected() {
        let schema = TabularSchema::new(vec![ColumnSpec::numeric("a")]).unwrap();
        let t = RawTable::new(schema, vec![vec![Cell::Missing]]).unwrap();
        assert!(encode_onehot(&t).is_err());
    }
}
