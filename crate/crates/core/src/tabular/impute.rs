//! Mean, k-nearest-neighbour and chained-regression (MICE) imputation.
//!
//! Every imputer is fitted on one table (the training split) and can then
//! fill other tables with frozen state. Observed cells are never modified.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Cell, ColumnKind, RawTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ImputeMethod {
    Mean,
    Knn { k: usize },
    Mice { iterations: usize },
}

impl Default for ImputeMethod {
    fn default() -> Self {
        ImputeMethod::Knn { k: 5 }
    }
}

impl ImputeMethod {
    pub fn label(&self) -> &'static str {
        match self {
            ImputeMethod::Mean => "mean",
            ImputeMethod::Knn { .. } => "knn",
            ImputeMethod::Mice { .. } => "mice",
        }
    }
}

/// Per-column fallback: numeric mean or categorical mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnFill {
    pub values: Vec<Cell>,
}

impl ColumnFill {
    fn fit(table: &RawTable) -> Result<Self> {
        let values = (0..table.schema.len())
            .map(|j| {
                let col = &table.schema.columns[j];
                let cells = table.rows.iter().map(|r| &r[j]).filter(|c| !c.is_missing());
                match col.kind {
                    ColumnKind::Numeric => {
                        let (sum, n) = cells.filter_map(Cell::as_num).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
                        if n == 0 {
                            return Err(Error::Data(format!("column `{}` is entirely missing", col.name)));
                        }
                        Ok(Cell::Num(sum / n as f64))
                    }
                    ColumnKind::Categorical => {
                        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                        for c in cells {
                            if let Cell::Cat(s) = c {
                                *counts.entry(s).or_default() += 1;
                            }
                        }
                        // ties resolve to the lexicographically smallest category
                        let best = counts
                            .iter()
                            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                            .map(|(s, _)| Cell::Cat(s.to_string()));
                        best.ok_or_else(|| Error::Data(format!("column `{}` is entirely missing", col.name)))
                    }
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { values })
    }

    fn apply(&self, table: &RawTable) -> RawTable {
        let mut out = table.clone();
        for row in &mut out.rows {
            for (cell, fill) in row.iter_mut().zip(&self.values) {
                if cell.is_missing() {
                    *cell = fill.clone();
                }
            }
        }
        out
    }
}

fn numeric_columns(table: &RawTable) -> Vec<usize> {
    table
        .schema
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.kind == ColumnKind::Numeric)
        .map(|(j, _)| j)
        .collect()
}

/// Reference rows and scaling for neighbour search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnState {
    pub k: usize,
    pub reference: RawTable,
    /// `(mean, std)` over observed values, per numeric column.
    pub scale: Vec<(usize, f64, f64)>,
    pub fallback: ColumnFill,
}

impl KnnState {
    fn fit(table: &RawTable, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        let fallback = ColumnFill::fit(table)?;
        let scale = numeric_columns(table)
            .into_iter()
            .map(|j| {
                let vals: Vec<f64> = table.rows.iter().filter_map(|r| r[j].as_num()).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                (j, mean, std)
            })
            .collect();
        Ok(Self {
            k,
            reference: table.clone(),
            scale,
            fallback,
        })
    }

    /// Euclidean distance over mutually observed standardized numeric
    /// columns, scaled up by the fraction observed. `None` when no column
    /// is shared.
    fn distance(&self, a: &[Cell], b: &[Cell]) -> Option<f64> {
        let mut sum = 0.0;
        let mut present = 0usize;
        for &(j, _, std) in &self.scale {
            if let (Some(x), Some(y)) = (a[j].as_num(), b[j].as_num()) {
                sum += ((x - y) / std).powi(2);
                present += 1;
            }
        }
        (present > 0).then(|| (sum * self.scale.len() as f64 / present as f64).sqrt())
    }

    fn apply(&self, table: &RawTable) -> RawTable {
        let mut out = table.clone();
        for (row_idx, row) in table.rows.iter().enumerate() {
            if !row.iter().any(Cell::is_missing) {
                continue;
            }
            let mut dists: Vec<(f64, usize)> = self
                .reference
                .rows
                .iter()
                .enumerate()
                .filter_map(|(i, r)| self.distance(row, r).map(|d| (d, i)))
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (j, cell) in row.iter().enumerate() {
                if !cell.is_missing() {
                    continue;
                }
                let donors: Vec<&Cell> = dists
                    .iter()
                    .map(|&(_, i)| &self.reference.rows[i][j])
                    .filter(|c| !c.is_missing())
                    .take(self.k)
                    .collect();
                out.rows[row_idx][j] = if donors.is_empty() {
                    log::warn!(
                        "no neighbour observes column `{}`; using the column fallback",
                        table.schema.columns[j].name
                    );
                    self.fallback.values[j].clone()
                } else {
                    aggregate(&donors)
                };
            }
        }
        out
    }
}

/// Mean of numeric donors, or the most frequent category (ties go to the
/// category of the nearest donor).
fn aggregate(donors: &[&Cell]) -> Cell {
    if let Some(Cell::Num(_)) = donors.first() {
        let sum: f64 = donors.iter().filter_map(|c| c.as_num()).sum();
        return Cell::Num(sum / donors.len() as f64);
    }
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for c in donors {
        if let Cell::Cat(s) = c {
            match counts.iter_mut().find(|(k, _)| k == s) {
                Some(e) => e.1 += 1,
                None => counts.push((s, 1)),
            }
        }
    }
    let best = counts.iter().fold(None::<(&str, usize)>, |best, &(s, n)| match best {
        Some((_, bn)) if bn >= n => best,
        _ => Some((s, n)),
    });
    Cell::Cat(best.map(|(s, _)| s.to_string()).unwrap_or_default())
}

/// Linear model of one numeric column on all other numeric columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub target: usize,
    pub predictors: Vec<usize>,
    /// Intercept first, then one coefficient per predictor. `None` when the
    /// design was singular and the column mean is used instead.
    pub coefficients: Option<Vec<f64>>,
}

impl Regression {
    fn predict(&self, row: &[Cell], fallback: f64) -> f64 {
        match &self.coefficients {
            Some(beta) => {
                beta[0]
                    + self
                        .predictors
                        .iter()
                        .zip(&beta[1..])
                        .map(|(&p, b)| b * row[p].as_num().unwrap_or(0.0))
                        .sum::<f64>()
            }
            None => fallback,
        }
    }
}

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting;
/// `None` if `a` is numerically singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-10 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Relative ridge penalty on standardized predictors; keeps exactly
/// collinear columns (a total next to its parts) solvable.
const RIDGE: f64 = 1e-8;

fn fit_regression(current: &RawTable, observed: &[Vec<bool>], target: usize, numeric: &[usize]) -> Regression {
    let all: Vec<usize> = numeric.iter().copied().filter(|&j| j != target).collect();
    let rows: Vec<&Vec<Cell>> = current.rows.iter().zip(observed).filter(|(_, o)| o[target]).map(|(r, _)| r).collect();
    let name = &current.schema.columns[target].name;
    if rows.is_empty() {
        log::warn!("no observed values for column `{name}`; falling back to the mean");
        return Regression {
            target,
            predictors: all,
            coefficients: None,
        };
    }
    let n = rows.len() as f64;
    let val = |r: &Vec<Cell>, j: usize| r[j].as_num().unwrap_or(0.0);
    let mean = |j: usize| rows.iter().map(|r| val(r, j)).sum::<f64>() / n;
    let y_mean = mean(target);
    // constant predictors carry nothing beyond the intercept
    let mut predictors = Vec::new();
    let mut centre = Vec::new();
    let mut scale = Vec::new();
    for &j in &all {
        let m = mean(j);
        let sd = (rows.iter().map(|r| (val(r, j) - m).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 1e-12 * (1.0 + m.abs()) {
            predictors.push(j);
            centre.push(m);
            scale.push(sd);
        }
    }
    let p = predictors.len();
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    let mut x = vec![0.0; p];
    for r in &rows {
        for (k, &j) in predictors.iter().enumerate() {
            x[k] = (val(r, j) - centre[k]) / scale[k];
        }
        let y = val(r, target) - y_mean;
        for a in 0..p {
            xty[a] += x[a] * y;
            for b in 0..p {
                xtx[a][b] += x[a] * x[b];
            }
        }
    }
    for (a, row) in xtx.iter_mut().enumerate() {
        row[a] += RIDGE * n;
    }
    let coefficients = solve(xtx, xty).map(|z| {
        let beta: Vec<f64> = z.iter().zip(&scale).map(|(b, s)| b / s).collect();
        let intercept = y_mean - beta.iter().zip(&centre).map(|(b, m)| b * m).sum::<f64>();
        std::iter::once(intercept).chain(beta).collect()
    });
    if coefficients.is_none() {
        log::warn!("singular regression design for column `{name}`; falling back to the mean");
    }
    Regression {
        target,
        predictors,
        coefficients,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiceState {
    pub iterations: usize,
    pub fallback: ColumnFill,
    pub models: Vec<Regression>,
}

impl MiceState {
    /// Runs the chained procedure on `table` and returns the state together
    /// with the imputed table.
    fn fit(table: &RawTable, iterations: usize) -> Result<(Self, RawTable)> {
        if iterations == 0 {
            return Err(Error::Contract("MICE needs at least one iteration".into()));
        }
        let fallback = ColumnFill::fit(table)?;
        let observed = observed_mask(table);
        let numeric = numeric_columns(table);
        let mut current = fallback.apply(table);
        let incomplete: Vec<usize> = numeric
            .iter()
            .copied()
            .filter(|&j| observed.iter().any(|o| !o[j]))
            .collect();
        for _ in 0..iterations {
            for &j in &incomplete {
                let model = fit_regression(&current, &observed, j, &numeric);
                fill_column(&mut current, &observed, &model, &fallback);
            }
        }
        // one model per numeric column so new tables can be filled too
        let models = numeric
            .iter()
            .map(|&j| fit_regression(&current, &observed, j, &numeric))
            .collect();
        Ok((
            Self {
                iterations,
                fallback,
                models,
            },
            current,
        ))
    }

    fn apply(&self, table: &RawTable) -> RawTable {
        let observed = observed_mask(table);
        let mut current = self.fallback.apply(table);
        for _ in 0..self.iterations {
            for model in &self.models {
                if observed.iter().any(|o| !o[model.target]) {
                    fill_column(&mut current, &observed, model, &self.fallback);
                }
            }
        }
        current
    }
}

fn observed_mask(table: &RawTable) -> Vec<Vec<bool>> {
    table
        .rows
        .iter()
        .map(|r| r.iter().map(|c| !c.is_missing()).collect())
        .collect()
}

fn fill_column(current: &mut RawTable, observed: &[Vec<bool>], model: &Regression, fallback: &ColumnFill) {
    let j = model.target;
    let mean = fallback.values[j].as_num().unwrap_or(0.0);
    for r in 0..current.rows.len() {
        if !observed[r][j] {
            let v = model.predict(&current.rows[r], mean);
            current.rows[r][j] = Cell::Num(v);
        }
    }
}

/// Frozen imputation state fitted on a training table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FittedImputer {
    Mean(ColumnFill),
    Knn(KnnState),
    Mice(MiceState),
}

impl FittedImputer {
    pub fn transform(&self, table: &RawTable) -> Result<RawTable> {
        let expected = match self {
            FittedImputer::Mean(f) => f.values.len(),
            FittedImputer::Knn(s) => s.fallback.values.len(),
            FittedImputer::Mice(s) => s.fallback.values.len(),
        };
        if table.schema.len() != expected {
            return Err(Error::Dimension(format!(
                "imputer fitted on {expected} columns, table has {}",
                table.schema.len()
            )));
        }
        Ok(match self {
            FittedImputer::Mean(f) => f.apply(table),
            FittedImputer::Knn(s) => s.apply(table),
            FittedImputer::Mice(s) => s.apply(table),
        })
    }
}

/// Fits an imputer on `train` and returns it with the imputed training table.
pub fn fit_imputer(method: ImputeMethod, train: &RawTable) -> Result<(FittedImputer, RawTable)> {
    match method {
        ImputeMethod::Mean => {
            let f = ColumnFill::fit(train)?;
            let out = f.apply(train);
            Ok((FittedImputer::Mean(f), out))
        }
        ImputeMethod::Knn { k } => {
            let s = KnnState::fit(train, k)?;
            let out = s.apply(train);
            Ok((FittedImputer::Knn(s), out))
        }
        ImputeMethod::Mice { iterations } => {
            let (s, out) = MiceState::fit(train, iterations)?;
            Ok((FittedImputer::Mice(s), out))
        }
    }
}

pub fn impute_mean(table: &RawTable) -> Result<RawTable> {
    fit_imputer(ImputeMethod::Mean, table).map(|(_, t)| t)
}

pub fn impute_knn(table: &RawTable, k: usize) -> Result<RawTable> {
    fit_imputer(ImputeMethod::Knn { k }, table).map(|(_, t)| t)
}

pub fn impute_mice(table: &RawTable, iterations: usize) -> Result<RawTable> {
    fit_imputer(ImputeMethod::Mice { iterations }, table).map(|(_, t)| t)
}
