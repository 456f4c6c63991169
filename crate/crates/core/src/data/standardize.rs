use serde::{Deserialize, Serialize};

use super::{mean, sample_std, FeatureTable};
use crate::error::{Error, Result};

/// Affine scaling of one column: `z = (x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

impl ColumnScale {
    /// Fits mean and sample standard deviation (divisor N - 1).
    pub fn fit(name: &str, values: &[f64]) -> Result<Self> {
        let std = sample_std(values);
        if values.len() < 2 || !(std > 0.0) || !std.is_finite() {
            return Err(Error::ConstantColumn(name.to_string()));
        }
        Ok(Self {
            name: name.to_string(),
            mean: mean(values),
            std,
        })
    }

    pub fn identity(name: &str) -> Self {
        Self {
            name: name.to_string(),
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// A spread (standard deviation, interval half-width) only scales.
    pub fn invert_spread(&self, s: f64) -> f64 {
        s * self.std
    }
}

/// Per-column scaling parameters plus the label's scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub columns: Vec<ColumnScale>,
    pub label: Option<ColumnScale>,
}

/// Fits per-column (mean, std) on the available entries of `table` and
/// returns the standardized table carrying those parameters. Labels, when
/// present, are standardized the same way.
pub fn standardize_fit(table: &FeatureTable) -> Result<FeatureTable> {
    if table.n_rows() < 2 {
        return Err(Error::Argument("standardization needs at least two rows".into()));
    }
    let columns = (0..table.n_features())
        .map(|j| {
            let vals: Vec<f64> = table.column(j).into_iter().flatten().collect();
            ColumnScale::fit(&table.feature_names()[j], &vals)
        })
        .collect::<Result<Vec<_>>>()?;
    let label = table
        .labels()
        .map(|l| ColumnScale::fit("soh", l))
        .transpose()?;
    let params = Standardization { columns, label };
    standardize_apply(table, &params)
}

fn check_columns(table: &FeatureTable, params: &Standardization) -> Result<()> {
    let names: Vec<&str> = params.columns.iter().map(|c| c.name.as_str()).collect();
    let table_names: Vec<&str> = table.feature_names().iter().map(String::as_str).collect();
    if names != table_names {
        return Err(Error::ParameterMismatch(format!(
            "parameters cover {names:?}, table has {table_names:?}"
        )));
    }
    Ok(())
}

/// Standardizes a physical-unit table with previously fitted parameters.
pub fn standardize_apply(table: &FeatureTable, params: &Standardization) -> Result<FeatureTable> {
    check_columns(table, params)?;
    let mut out = table.clone();
    let mask = table.available().to_vec();
    for (row, m) in out.rows_mut().iter_mut().zip(&mask) {
        for (j, v) in row.iter_mut().enumerate() {
            if m[j] {
                *v = params.columns[j].apply(*v);
            }
        }
    }
    if let (Some(scale), Some(labels)) = (&params.label, out.labels_mut()) {
        labels.iter_mut().for_each(|y| *y = scale.apply(*y));
    }
    out.set_standardization(Some(params.clone()));
    Ok(out)
}

/// Maps a standardized table back to physical units.
pub fn standardize_invert(table: &FeatureTable, params: &Standardization) -> Result<FeatureTable> {
    check_columns(table, params)?;
    let mut out = table.clone();
    let mask = table.available().to_vec();
    for (row, m) in out.rows_mut().iter_mut().zip(&mask) {
        for (j, v) in row.iter_mut().enumerate() {
            if m[j] {
                *v = params.columns[j].invert(*v);
            }
        }
    }
    if let (Some(scale), Some(labels)) = (&params.label, out.labels_mut()) {
        labels.iter_mut().for_each(|y| *y = scale.invert(*y));
    }
    out.set_standardization(None);
    Ok(out)
}
