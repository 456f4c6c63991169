use std::collections::HashSet;
use std::fs::File;
use std::path::Path;

use super::dataset::map_csv_io;
use super::Standardization;
use crate::error::{Error, Result};

/// Identifies the charging record a feature row was extracted from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleId {
    pub source_id: String,
    pub cycle: u32,
}

impl std::fmt::Display for SampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.source_id, self.cycle)
    }
}

/// Matrix of named feature values, one row per sample, with SOH labels.
///
/// Unavailable entries (a feature that could not be extracted for a sample)
/// are tracked in an availability mask and stored as `0.0`, so every stored
/// value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    feature_names: Vec<String>,
    ids: Vec<SampleId>,
    rows: Vec<Vec<f64>>,
    available: Vec<Vec<bool>>,
    labels: Option<Vec<f64>>,
    standardization: Option<Standardization>,
}

impl FeatureTable {
    /// Builds a fully-available table.
    pub fn new(
        feature_names: Vec<String>,
        ids: Vec<SampleId>,
        rows: Vec<Vec<f64>>,
        labels: Option<Vec<f64>>,
    ) -> Result<Self> {
        let available = rows.iter().map(|r| vec![true; r.len()]).collect();
        Self::with_mask(feature_names, ids, rows, available, labels)
    }

    /// Builds a table with an explicit availability mask. Values in masked
    /// cells are replaced by `0.0`.
    pub fn with_mask(
        feature_names: Vec<String>,
        ids: Vec<SampleId>,
        mut rows: Vec<Vec<f64>>,
        available: Vec<Vec<bool>>,
        labels: Option<Vec<f64>>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Argument(format!("duplicate feature name `{name}`")));
            }
        }
        let n = rows.len();
        if ids.len() != n || available.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: ids.len().min(available.len()),
            });
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: l.len(),
                });
            }
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::Argument("non-finite label".into()));
            }
        }
        let width = feature_names.len();
        for (i, (row, mask)) in rows.iter_mut().zip(&available).enumerate() {
            if row.len() != width || mask.len() != width {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    found: row.len(),
                });
            }
            for (j, (v, &ok)) in row.iter_mut().zip(mask).enumerate() {
                if !ok {
                    *v = 0.0;
                } else if !v.is_finite() {
                    return Err(Error::Argument(format!(
                        "non-finite value for `{}` in row {i}",
                        feature_names[j]
                    )));
                }
            }
        }
        Ok(Self {
            feature_names,
            ids,
            rows,
            available,
            labels,
            standardization: None,
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn available(&self) -> &[Vec<bool>] {
        &self.available
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[f64]> {
        self.labels()
            .ok_or_else(|| Error::Argument("feature table carries no SOH labels".into()))
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub(crate) fn set_standardization(&mut self, s: Option<Standardization>) {
        self.standardization = s;
    }

    pub(crate) fn rows_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.rows
    }

    pub(crate) fn labels_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.labels.as_mut()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Values of a column, with `None` for masked entries.
    pub fn column(&self, j: usize) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .zip(&self.available)
            .map(|(r, m)| m[j].then_some(r[j]))
            .collect()
    }

    pub fn is_fully_available(&self) -> bool {
        self.available.iter().all(|m| m.iter().all(|&b| b))
    }

    /// Keeps only the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureTable {
        FeatureTable {
            feature_names: self.feature_names.clone(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            available: indices.iter().map(|&i| self.available[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            standardization: self.standardization.clone(),
        }
    }

    /// Keeps only the named columns, in the given order.
    pub fn select_columns(&self, names: &[String]) -> Result<FeatureTable> {
        let idx = names
            .iter()
            .map(|n| {
                self.column_index(n)
                    .ok_or_else(|| Error::Argument(format!("unknown feature `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let pick = |row: &Vec<f64>| idx.iter().map(|&j| row[j]).collect::<Vec<_>>();
        let standardization = self.standardization.as_ref().map(|s| Standardization {
            columns: idx.iter().map(|&j| s.columns[j].clone()).collect(),
            label: s.label.clone(),
        });
        Ok(FeatureTable {
            feature_names: names.to_vec(),
            ids: self.ids.clone(),
            rows: self.rows.iter().map(pick).collect(),
            available: self
                .available
                .iter()
                .map(|m| idx.iter().map(|&j| m[j]).collect())
                .collect(),
            labels: self.labels.clone(),
            standardization,
        })
    }

    /// Indices of rows whose named columns are all available.
    pub fn complete_rows(&self, columns: &[usize]) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| columns.iter().all(|&j| self.available[i][j]))
            .collect()
    }

    /// Names of columns whose available values are all equal (or that have
    /// fewer than two available values).
    pub fn constant_columns(&self) -> Vec<String> {
        (0..self.n_features())
            .filter(|&j| {
                let vals: Vec<f64> = self.column(j).into_iter().flatten().collect();
                vals.len() < 2 || vals.iter().all(|&v| v == vals[0])
            })
            .map(|j| self.feature_names[j].clone())
            .collect()
    }

    /// Drops the named columns.
    pub fn without_columns(&self, drop: &[String]) -> Result<FeatureTable> {
        let keep: Vec<String> = self
            .feature_names
            .iter()
            .filter(|n| !drop.contains(n))
            .cloned()
            .collect();
        self.select_columns(&keep)
    }
}

/// Writes a feature table CSV: `source_id, cycle, <features...>, soh`.
/// Masked entries are written as empty fields.
pub fn write_feature_table(path: &Path, table: &FeatureTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    let mut header = vec!["source_id".to_string(), "cycle".to_string()];
    header.extend(table.feature_names.iter().cloned());
    header.push("soh".into());
    w.write_record(&header)?;
    for i in 0..table.n_rows() {
        let mut rec = vec![table.ids[i].source_id.clone(), table.ids[i].cycle.to_string()];
        for j in 0..table.n_features() {
            rec.push(if table.available[i][j] {
                table.rows[i][j].to_string()
            } else {
                String::new()
            });
        }
        rec.push(table.labels.as_ref().map(|l| l[i].to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the availability mask as 0/1 flags with the same layout as the
/// feature table (without the label column).
pub fn write_availability_mask(path: &Path, table: &FeatureTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    let mut header = vec!["source_id".to_string(), "cycle".to_string()];
    header.extend(table.feature_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..table.n_rows() {
        let mut rec = vec![table.ids[i].source_id.clone(), table.ids[i].cycle.to_string()];
        rec.extend(table.available[i].iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a feature table CSV written by [`write_feature_table`]. Empty
/// feature fields load as masked; an all-empty `soh` column loads as an
/// unlabeled table.
pub fn read_feature_table(path: &Path) -> Result<FeatureTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[0] != "source_id" || cols[1] != "cycle" {
        return Err(Error::Schema(format!(
            "{}: expected header `source_id,cycle,<features...>[,soh]`",
            path.display()
        )));
    }
    let has_soh = *cols.last().unwrap() == "soh";
    let feature_end = if has_soh { cols.len() - 1 } else { cols.len() };
    let names: Vec<String> = cols[2..feature_end].iter().map(|s| s.to_string()).collect();

    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut mask = Vec::new();
    let mut labels: Vec<Option<f64>> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Schema(format!("row {}: not a number: {s:?}", line + 2)))
        };
        let cycle = rec
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Schema(format!("row {}: bad cycle", line + 2)))?;
        ids.push(SampleId {
            source_id: rec.get(0).unwrap_or("").to_string(),
            cycle,
        });
        let mut row = Vec::with_capacity(names.len());
        let mut m = Vec::with_capacity(names.len());
        for j in 2..feature_end {
            let s = rec.get(j).unwrap_or("");
            if s.is_empty() {
                row.push(0.0);
                m.push(false);
            } else {
                row.push(parse(s)?);
                m.push(true);
            }
        }
        rows.push(row);
        mask.push(m);
        labels.push(if has_soh {
            match rec.get(feature_end).unwrap_or("") {
                "" => None,
                s => Some(parse(s)?),
            }
        } else {
            None
        });
    }
    let labels = if labels.iter().all(Option::is_some) && !labels.is_empty() {
        Some(labels.into_iter().flatten().collect())
    } else if labels.iter().all(Option::is_none) {
        None
    } else {
        return Err(Error::Schema(format!("{}: some rows lack an SOH label", path.display())));
    };
    FeatureTable::with_mask(names, ids, rows, mask, labels)
}
