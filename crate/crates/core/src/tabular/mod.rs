//! Clinical-tabular pipeline: imputation, one-hot encoding, standardization
//! and the dense embedding MLP.

mod encode;
mod impute;

pub use encode::{encode_onehot, FeatureGroup, TabularMatrix, TabularTransform};
pub use impute::{
    fit_imputer, impute_knn, impute_mean, impute_mice, FittedImputer, ImputeMethod,
};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Scope, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Mlp, ModelRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Fixed category order for categorical columns; learned from the
    /// training split when left empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl ColumnSpec {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
            categories: Vec::new(),
        }
    }

    pub fn categorical(name: impl Into<String>, categories: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            categories: categories.iter().map(|c| c.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TabularSchema {
    pub columns: Vec<ColumnSpec>,
}

impl TabularSchema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let schema = Self { columns };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Data(format!("duplicate column `{}`", c.name)));
            }
            if c.kind == ColumnKind::Numeric && !c.categories.is_empty() {
                return Err(Error::Data(format!("numeric column `{}` lists categories", c.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Num(f64),
    Cat(String),
    Missing,
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            _ => None,
        }
    }
}

/// Rows of raw clinical values, possibly with missing cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTable {
    pub schema: TabularSchema,
    pub rows: Vec<Vec<Cell>>,
}

impl RawTable {
    pub fn new(schema: TabularSchema, rows: Vec<Vec<Cell>>) -> Result<Self> {
        schema.validate()?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return dim_err(format!("row {i} has {} cells, schema has {}", row.len(), schema.len()));
            }
            for (cell, col) in row.iter().zip(&schema.columns) {
                let ok = match (cell, col.kind) {
                    (Cell::Missing, _) => true,
                    (Cell::Num(v), ColumnKind::Numeric) => v.is_finite(),
                    (Cell::Cat(_), ColumnKind::Categorical) => true,
                    _ => false,
                };
                if !ok {
                    return Err(Error::Data(format!(
                        "row {i}: value {cell:?} does not fit column `{}`",
                        col.name
                    )));
                }
            }
        }
        Ok(Self { schema, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn missing_count(&self) -> usize {
        self.rows.iter().flatten().filter(|c| c.is_missing()).count()
    }

    pub fn select(&self, rows: &[usize]) -> RawTable {
        RawTable {
            schema: self.schema.clone(),
            rows: rows.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Appends numeric columns (one value per row).
    pub fn with_numeric_columns(mut self, names: &[String], values: &[Vec<f64>]) -> Result<Self> {
        if values.len() != self.rows.len() {
            return dim_err("appended columns must have one entry per row");
        }
        for n in names {
            self.schema.columns.push(ColumnSpec::numeric(n.clone()));
        }
        self.schema.validate()?;
        for (row, extra) in self.rows.iter_mut().zip(values) {
            if extra.len() != names.len() {
                return dim_err("appended row width differs from column count");
            }
            row.extend(extra.iter().map(|&v| Cell::Num(v)));
        }
        Ok(self)
    }

    /// Keeps only the named columns, in the given order.
    pub fn project(&self, names: &[&str]) -> Result<RawTable> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.schema
                    .position(n)
                    .ok_or_else(|| Error::Data(format!("unknown column `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(RawTable {
            schema: TabularSchema {
                columns: idx.iter().map(|&i| self.schema.columns[i].clone()).collect(),
            },
            rows: self
                .rows
                .iter()
                .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
                .collect(),
        })
    }
}

/// Dense tabular embedding `X_tab`, shaped `(B, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularEmbedding {
    pub x_tab: Tensor,
}

/// Two-layer perceptron `F_enc → 2·D → D` producing `X_tab`.
#[derive(Debug, Clone, Copy)]
pub struct TabularEmbedder {
    pub mlp: Mlp,
    pub dim: usize,
}

impl TabularEmbedder {
    pub fn new(store: &mut ParamStore, name: &str, encoded_width: usize, dim: usize, rng: &mut ModelRng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, name, encoded_width, 2 * dim, dim, rng)?,
            dim,
        })
    }

    pub fn forward(&self, scope: &mut Scope, rows: Var) -> Result<Var> {
        let width = scope.tape.shape(rows).last().copied().unwrap_or(0);
        if width != self.mlp.hidden.fan_in {
            return dim_err(format!(
                "tabular rows have {width} columns, embedder expects {}",
                self.mlp.hidden.fan_in
            ));
        }
        self.mlp.forward(scope, rows)
    }
}

/// Embeds encoded rows with fixed parameters.
pub fn embed_tabular(embedder: &TabularEmbedder, params: &ParamStore, rows: &TabularMatrix) -> Result<TabularEmbedding> {
    let mut scope = Scope::new(params, false);
    let x = scope.tape.leaf(&rows.rows)?;
    let y = embedder.forward(&mut scope, x)?;
    Ok(TabularEmbedding {
        x_tab: scope.tape.to_tensor(y),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn schema_rejects_duplicates() {
        let r = TabularSchema::new(vec![ColumnSpec::numeric("a"), ColumnSpec::numeric("a")]);
        assert!(r.is_err());
    }

    #[test]
    fn table_checks_cell_kinds() {
        let schema = TabularSchema::new(vec![ColumnSpec::numeric("a")]).unwrap();
        assert!(RawTable::new(schema.clone(), vec![vec![Cell::Cat("x".into())]]).is_err());
        assert!(RawTable::new(schema, vec![vec![Cell::Missing]]).is_ok());
    }

    #[test]
    fn zero_weights_embed_to_zero() {
        let mut store = ParamStore::new();
        let mut rng = ModelRng::seed_from_u64(0);
        let emb = TabularEmbedder::new(&mut store, "tab", 6, 31, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let rows = TabularMatrix {
            rows: Tensor::from_fn(&[4, 6], |i| i as f64 - 10.0),
            column_names: (0..6).map(|i| format!("f{i}")).collect(),
            groups: vec![],
        };
        let out = embed_tabular(&emb, &store, &rows).unwrap();
        assert_eq!(out.x_tab.shape(), &[4, 31]);
        assert!(out.x_tab.data().iter().all(|&v| v == 0.0));
    }
}
