//! CSV ingestion, imputation, categorical coding and standardization.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::access::{AccessLog, Field};
use super::schema::{ColumnKind, TableSchema};
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-9;

/// Typed cells of one column; `None` marks a missing value. Categorical
/// cells hold the code of the category in schema order.
#[derive(Debug, Clone, PartialEq)]
pub enum RawColumn {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<usize>>),
    Text(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub schema: TableSchema,
    /// Parallel to `schema.columns`.
    pub columns: Vec<RawColumn>,
    pub n_rows: usize,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Reads the schema's columns by header name; extra CSV columns are ignored.
pub fn load_tabular(path: &Path, schema: &TableSchema) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let positions: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h.trim() == c.name)
                .ok_or_else(|| Error::Data(format!("{}: missing column `{}`", path.display(), c.name)))
        })
        .collect::<Result<_>>()?;

    let mut columns: Vec<RawColumn> = schema
        .columns
        .iter()
        .map(|c| match c.kind {
            ColumnKind::Numeric | ColumnKind::TargetNumeric => RawColumn::Numeric(vec![]),
            ColumnKind::Categorical(_) | ColumnKind::TargetClass(_) => RawColumn::Categorical(vec![]),
            ColumnKind::ImagePath => RawColumn::Text(vec![]),
        })
        .collect();
    let mut unknown: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    let mut n_rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = r + 2;
        for ((col, &pos), out) in schema.columns.iter().zip(&positions).zip(&mut columns) {
            let cell = rec.get(pos).unwrap_or("").trim();
            match (&col.kind, out) {
                (ColumnKind::Numeric | ColumnKind::TargetNumeric, RawColumn::Numeric(v)) => {
                    if cell.is_empty() {
                        v.push(None);
                    } else {
                        let x: f64 = cell.parse().map_err(|_| {
                            Error::Data(format!(
                                "{} line {line}: column `{}`: cannot parse `{cell}` as a number",
                                path.display(),
                                col.name
                            ))
                        })?;
                        if !x.is_finite() {
                            return Err(Error::Data(format!(
                                "{} line {line}: column `{}`: non-finite value",
                                path.display(),
                                col.name
                            )));
                        }
                        v.push(Some(x));
                    }
                }
                (ColumnKind::Categorical(cats) | ColumnKind::TargetClass(cats), RawColumn::Categorical(v)) => {
                    if cell.is_empty() {
                        v.push(None);
                    } else if let Some(code) = cats.iter().position(|c| c == cell) {
                        v.push(Some(code));
                    } else {
                        unknown.entry(col.name.as_str()).or_default().insert(cell.to_string());
                        v.push(None);
                    }
                }
                (ColumnKind::ImagePath, RawColumn::Text(v)) => {
                    if cell.is_empty() {
                        return Err(Error::Data(format!(
                            "{} line {line}: empty image path",
                            path.display()
                        )));
                    }
                    v.push(cell.to_string());
                }
                _ => unreachable!("column storage follows schema kind"),
            }
        }
        n_rows += 1;
    }
    if !unknown.is_empty() {
        let listing: Vec<String> = unknown
            .iter()
            .map(|(c, vals)| format!("`{c}`: {}", vals.iter().cloned().collect::<Vec<_>>().join(", ")))
            .collect();
        return Err(Error::Data(format!(
            "{}: unknown category values ({})",
            path.display(),
            listing.join("; ")
        )));
    }
    if n_rows == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    for (col, data) in schema.columns.iter().zip(&columns) {
        if col.kind.is_target() {
            let missing = match data {
                RawColumn::Numeric(v) => v.iter().position(Option::is_none),
                RawColumn::Categorical(v) => v.iter().position(Option::is_none),
                RawColumn::Text(_) => None,
            };
            if let Some(r) = missing {
                return Err(Error::Data(format!(
                    "{} line {}: missing target `{}`",
                    path.display(),
                    r + 2,
                    col.name
                )));
            }
        }
    }
    Ok(RawTable {
        schema: schema.clone(),
        columns,
        n_rows,
    })
}

/// Writes a table in the format read by [`load_tabular`]. Numbers use the
/// shortest representation that parses back to the same value.
pub fn write_tabular(path: &Path, table: &RawTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(table.schema.columns.iter().map(|c| c.name.as_str()))
        .map_err(|e| csv_err(path, e))?;
    for r in 0..table.n_rows {
        let row: Vec<String> = table
            .schema
            .columns
            .iter()
            .zip(&table.columns)
            .map(|(col, data)| match (data, &col.kind) {
                (RawColumn::Numeric(v), _) => v[r].map(|x| x.to_string()).unwrap_or_default(),
                (RawColumn::Categorical(v), ColumnKind::Categorical(cats) | ColumnKind::TargetClass(cats)) => {
                    v[r].map(|c| cats[c].clone()).unwrap_or_default()
                }
                (RawColumn::Text(v), _) => v[r].clone(),
                _ => unreachable!("column storage follows schema kind"),
            })
            .collect();
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl RawTable {
    pub fn missing_count(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                RawColumn::Numeric(v) => v.iter().filter(|x| x.is_none()).count(),
                RawColumn::Categorical(v) => v.iter().filter(|x| x.is_none()).count(),
                RawColumn::Text(_) => 0,
            })
            .sum()
    }

    pub fn column(&self, name: &str) -> Option<&RawColumn> {
        self.schema
            .columns
            .iter()
            .position(|c| c.name == name)
            .map(|i| &self.columns[i])
    }

    fn input_indices(&self) -> Vec<usize> {
        (0..self.columns.len())
            .filter(|&i| self.schema.columns[i].kind.is_input())
            .collect()
    }
}

/// Fill value per input column, fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Fill {
    Mean(f64),
    Mode(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    /// Keyed by column name.
    pub fills: BTreeMap<String, Fill>,
}

impl Imputer {
    /// Numeric columns get the train mean; categorical columns the train
    /// mode, ties going to the lexicographically smallest category name.
    pub fn fit(table: &RawTable, train: &[usize], log: Option<&AccessLog>) -> Result<Self> {
        let mut fills = BTreeMap::new();
        if let Some(log) = log {
            for &r in train {
                log.record(Field::Features, r);
            }
        }
        for i in table.input_indices() {
            let col = &table.schema.columns[i];
            let fill = match (&table.columns[i], &col.kind) {
                (RawColumn::Numeric(v), _) => {
                    let seen: Vec<f64> = train.iter().filter_map(|&r| v[r]).collect();
                    if seen.is_empty() {
                        return Err(Error::Data(format!(
                            "column `{}` is entirely missing in the training split",
                            col.name
                        )));
                    }
                    Fill::Mean(seen.iter().sum::<f64>() / seen.len() as f64)
                }
                (RawColumn::Categorical(v), ColumnKind::Categorical(cats)) => {
                    let mut counts = vec![0usize; cats.len()];
                    for c in train.iter().filter_map(|&r| v[r]) {
                        counts[c] += 1;
                    }
                    let best = counts.iter().copied().max().unwrap_or(0);
                    if best == 0 {
                        return Err(Error::Data(format!(
                            "column `{}` is entirely missing in the training split",
                            col.name
                        )));
                    }
                    let mode = (0..cats.len())
                        .filter(|&c| counts[c] == best)
                        .min_by(|&a, &b| cats[a].cmp(&cats[b]))
                        .expect("at least one category reaches the maximum");
                    Fill::Mode(mode)
                }
                _ => unreachable!("inputs are numeric or categorical"),
            };
            fills.insert(col.name.clone(), fill);
        }
        Ok(Imputer { fills })
    }

    pub fn apply(&self, table: &RawTable) -> Result<RawTable> {
        let mut out = table.clone();
        for (col, data) in out.schema.columns.iter().zip(&mut out.columns) {
            if !col.kind.is_input() {
                continue;
            }
            let fill = self
                .fills
                .get(&col.name)
                .ok_or_else(|| Error::Data(format!("no fill value for column `{}`", col.name)))?;
            match (data, fill) {
                (RawColumn::Numeric(v), Fill::Mean(m)) => v.iter_mut().for_each(|x| {
                    x.get_or_insert(*m);
                }),
                (RawColumn::Categorical(v), Fill::Mode(c)) => v.iter_mut().for_each(|x| {
                    x.get_or_insert(*c);
                }),
                _ => return Err(Error::Data(format!("fill kind mismatch for column `{}`", col.name))),
            }
        }
        Ok(out)
    }
}

/// Per-feature z-scoring with population statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Already floored: a std below [`STD_FLOOR`] is stored as 1.
    pub std: Vec<f64>,
}

impl Standardizer {
    /// `rows` are `[n][d]` training rows.
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows
            .first()
            .ok_or_else(|| Error::Data("cannot standardize zero rows".into()))?
            .as_ref()
            .len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r.as_ref()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < STD_FLOOR {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn inverse(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }
}

/// Encoded, standardized inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    /// `[n][L]`
    pub x: Vec<Vec<f64>>,
    pub features: Standardizer,
    pub targets: EncodedTargets,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncodedTargets {
    /// Standardized `[n][T]` values with their train statistics.
    Regression { y: Vec<Vec<f64>>, stats: Standardizer },
    Classes { y: Vec<usize>, names: Vec<String> },
}

/// Raw (unstandardized) input matrix: numeric values as-is, categorical
/// values as their integer codes.
pub fn raw_inputs(table: &RawTable) -> Result<Vec<Vec<f64>>> {
    let idx = table.input_indices();
    (0..table.n_rows)
        .map(|r| {
            idx.iter()
                .map(|&i| {
                    let v = match &table.columns[i] {
                        RawColumn::Numeric(v) => v[r],
                        RawColumn::Categorical(v) => v[r].map(|c| c as f64),
                        RawColumn::Text(_) => unreachable!("inputs are numeric or categorical"),
                    };
                    v.ok_or_else(|| {
                        Error::Data(format!(
                            "row {r}, column `{}` still missing; impute first",
                            table.schema.columns[i].name
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

/// Codes categorical inputs, then z-scores every feature (and numeric
/// targets) with statistics from `train` rows only.
pub fn encode_standardize(table: &RawTable, train: &[usize], log: Option<&AccessLog>) -> Result<Encoded> {
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let raw = raw_inputs(table)?;
    if let Some(log) = log {
        for &r in train {
            log.record(Field::Features, r);
            log.record(Field::Target, r);
        }
    }
    let train_rows: Vec<&[f64]> = train.iter().map(|&r| raw[r].as_slice()).collect();
    let features = Standardizer::fit(&train_rows)?;
    let x = raw.iter().map(|r| features.transform(r)).collect();

    let target_cols: Vec<usize> = (0..table.columns.len())
        .filter(|&i| table.schema.columns[i].kind.is_target())
        .collect();
    let targets = match &table.schema.columns[target_cols[0]].kind {
        ColumnKind::TargetClass(names) => {
            let RawColumn::Categorical(v) = &table.columns[target_cols[0]] else {
                unreachable!("class targets are stored as codes")
            };
            EncodedTargets::Classes {
                y: v.iter().map(|c| c.expect("targets checked at load")).collect(),
                names: names.clone(),
            }
        }
        _ => {
            let y_raw: Vec<Vec<f64>> = (0..table.n_rows)
                .map(|r| {
                    target_cols
                        .iter()
                        .map(|&i| match &table.columns[i] {
                            RawColumn::Numeric(v) => v[r].expect("targets checked at load"),
                            _ => unreachable!("numeric targets"),
                        })
                        .collect()
                })
                .collect();
            let train_y: Vec<&[f64]> = train.iter().map(|&r| y_raw[r].as_slice()).collect();
            let stats = Standardizer::fit(&train_y)?;
            EncodedTargets::Regression {
                y: y_raw.iter().map(|r| stats.transform(r)).collect(),
                stats,
            }
        }
    };
    Ok(Encoded { x, features, targets })
}
