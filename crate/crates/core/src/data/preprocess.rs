use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::schema::{ColumnKind, Schema};
use super::{DataError, Result};

/// Raw string records of the schema's used columns, after dropping rows with
/// missing or malformed fields.
#[derive(Debug)]
pub(crate) struct Source {
    pub schema: Schema,
    /// Column names in `schema.used()` order.
    pub names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub rows: Vec<Vec<String>>,
    pub dropped_missing: usize,
    pub dropped_malformed: usize,
}

impl Source {
    pub fn read(path: &Path, schema: &Schema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| DataError::Csv(path.display().to_string(), e.to_string()))?;
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| DataError::Csv(path.display().to_string(), e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut idx = Vec::new();
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        for c in schema.used() {
            let pos = header
                .iter()
                .position(|h| h == &c.name)
                .ok_or_else(|| DataError::MissingColumn(c.name.clone()))?;
            idx.push(pos);
            names.push(c.name.clone());
            kinds.push(c.kind);
        }
        let mut rows = Vec::new();
        let (mut dropped_missing, mut dropped_malformed) = (0, 0);
        for rec in rdr.records() {
            let Ok(rec) = rec else {
                dropped_malformed += 1;
                continue;
            };
            if rec.len() != header.len() {
                dropped_malformed += 1;
                continue;
            }
            let fields: Vec<String> = idx.iter().map(|&i| rec[i].to_string()).collect();
            if fields.iter().any(|f| schema.is_missing(f)) {
                dropped_missing += 1;
                continue;
            }
            let numeric_ok = fields
                .iter()
                .zip(&kinds)
                .all(|(f, k)| *k != ColumnKind::Continuous || f.parse::<f64>().is_ok_and(f64::is_finite));
            if !numeric_ok {
                dropped_malformed += 1;
                continue;
            }
            rows.push(fields);
        }
        if dropped_missing + dropped_malformed > 0 {
            log::info!(
                "{}: dropped {} rows with missing values and {} malformed rows",
                path.display(),
                dropped_missing,
                dropped_malformed
            );
        }
        Ok(Self {
            schema: schema.clone(),
            names,
            kinds,
            rows,
            dropped_missing,
            dropped_malformed,
        })
    }

    fn column(&self, kind: ColumnKind) -> usize {
        self.kinds.iter().position(|&k| k == kind).unwrap()
    }

    pub fn labels(&self, rows: &[usize]) -> Vec<u8> {
        let c = self.column(ColumnKind::Label);
        let pos = &self.schema.label().positive;
        rows.iter()
            .map(|&r| u8::from(pos.contains(&self.rows[r][c])))
            .collect()
    }

    pub fn sensitive(&self, rows: &[usize]) -> Vec<u8> {
        let c = self.column(ColumnKind::Sensitive);
        let maj = &self.schema.sensitive().majority;
        rows.iter()
            .map(|&r| u8::from(maj.contains(&self.rows[r][c])))
            .collect()
    }

    /// Sorted distinct values of the sensitive column over the whole file.
    pub fn level_names(&self) -> Vec<String> {
        let c = self.column(ColumnKind::Sensitive);
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r[c].as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn levels(&self, rows: &[usize], names: &[String]) -> Vec<usize> {
        let c = self.column(ColumnKind::Sensitive);
        rows.iter()
            .map(|&r| names.iter().position(|n| n == &self.rows[r][c]).unwrap())
            .collect()
    }

    fn is_feature(&self, kind: ColumnKind) -> bool {
        match kind {
            ColumnKind::Continuous | ColumnKind::Categorical => true,
            ColumnKind::Sensitive => self.schema.sensitive_as_feature,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ColumnStats {
    Continuous { name: String, mean: f64, sd: f64 },
    Categorical { name: String, levels: Vec<String> },
}

/// Normalisation and one-hot maps fitted on a set of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub columns: Vec<ColumnStats>,
}

impl PreprocessStats {
    pub(crate) fn fit(src: &Source, rows: &[usize]) -> Self {
        let mut columns = Vec::new();
        for (c, (name, &kind)) in src.names.iter().zip(&src.kinds).enumerate() {
            if !src.is_feature(kind) {
                continue;
            }
            if kind == ColumnKind::Continuous {
                let vals: Vec<f64> = rows.iter().map(|&r| src.rows[r][c].parse().unwrap()).collect();
                let n = vals.len().max(1) as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                columns.push(ColumnStats::Continuous {
                    name: name.clone(),
                    mean,
                    sd,
                });
            } else {
                let set: BTreeSet<&str> = rows.iter().map(|&r| src.rows[r][c].as_str()).collect();
                columns.push(ColumnStats::Categorical {
                    name: name.clone(),
                    levels: set.into_iter().map(str::to_string).collect(),
                });
            }
        }
        Self { columns }
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.columns {
            match c {
                ColumnStats::Continuous { name, .. } => out.push(name.clone()),
                ColumnStats::Categorical { name, levels } => {
                    out.extend(levels.iter().map(|l| format!("{name}={l}")))
                }
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                ColumnStats::Continuous { .. } => 1,
                ColumnStats::Categorical { levels, .. } => levels.len(),
            })
            .sum()
    }

    /// Encodes `rows`; categories not seen during fitting become an all-zero
    /// block. Returns the matrix and the number of unknown values met.
    pub(crate) fn transform(&self, src: &Source, rows: &[usize]) -> (Array2<f64>, usize) {
        let col_of: HashMap<&str, usize> = src
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut out = Array2::zeros((rows.len(), self.width()));
        let mut unknown = 0;
        let mut offset = 0;
        for stats in &self.columns {
            match stats {
                ColumnStats::Continuous { name, mean, sd } => {
                    let c = col_of[name.as_str()];
                    for (i, &r) in rows.iter().enumerate() {
                        let v: f64 = src.rows[r][c].parse().unwrap();
                        out[[i, offset]] = (v - mean) / sd;
                    }
                    offset += 1;
                }
                ColumnStats::Categorical { name, levels } => {
                    let c = col_of[name.as_str()];
                    let pos: HashMap<&str, usize> =
                        levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
                    for (i, &r) in rows.iter().enumerate() {
                        match pos.get(src.rows[r][c].as_str()) {
                            Some(&k) => out[[i, offset + k]] = 1.0,
                            None => unknown += 1,
                        }
                    }
                    offset += levels.len();
                }
            }
        }
        if unknown > 0 {
            log::warn!("{unknown} categorical values unseen during fitting were encoded as zeros");
        }
        (out, unknown)
    }
}
