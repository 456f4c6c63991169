//! Core data types, dataset ingestion, standardization, splitting and the
//! two-sample Kolmogorov-Smirnov check used to validate random subsamples.

mod dataset;
mod ks;
mod split;
mod standardize;
mod table;

pub use dataset::{load_dataset, write_dataset, ColumnSchema, LoadReport, ProfileCleaning};
pub(crate) use dataset::{clean_rows, map_csv_io};
pub use ks::{ks_two_sample, KsResult};
pub use split::{split, SplitMode, SplitSpec, TableSplit};
pub use standardize::{standardize_apply, standardize_fit, standardize_invert, ColumnScale, Standardization};
pub use table::{read_feature_table, write_availability_mask, write_feature_table, FeatureTable, SampleId};

use crate::error::{Error, Result};

/// Minimum number of samples a charging profile must carry.
pub const MIN_PROFILE_SAMPLES: usize = 8;

/// One constant-current charging record: charged capacity against terminal
/// voltage, with the charging conditions and (optionally) the SOH label.
#[derive(Debug, Clone, PartialEq)]
pub struct QvProfile {
    source_id: String,
    cycle: u32,
    capacity: Vec<f64>,
    voltage: Vec<f64>,
    temperature: f64,
    c_rate: f64,
    soh: Option<f64>,
}

impl QvProfile {
    /// Builds a profile, checking the sample invariants: equal lengths of at
    /// least [`MIN_PROFILE_SAMPLES`], finite values, capacity non-decreasing
    /// and voltage strictly increasing.
    pub fn new(
        source_id: impl Into<String>,
        cycle: u32,
        capacity: Vec<f64>,
        voltage: Vec<f64>,
        temperature: f64,
        c_rate: f64,
        soh: Option<f64>,
    ) -> Result<Self> {
        let source_id = source_id.into();
        let invalid = |reason: String| Error::InvalidProfile {
            source_id: source_id.clone(),
            reason,
        };
        if capacity.len() != voltage.len() {
            return Err(invalid(format!(
                "{} capacity samples but {} voltage samples",
                capacity.len(),
                voltage.len()
            )));
        }
        if capacity.len() < MIN_PROFILE_SAMPLES {
            return Err(Error::ProfileTooShort {
                source_ids: vec![source_id],
                min: MIN_PROFILE_SAMPLES,
            });
        }
        if capacity.iter().chain(&voltage).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite sample".into()));
        }
        if !temperature.is_finite() || !c_rate.is_finite() {
            return Err(invalid("non-finite charging condition".into()));
        }
        if let Some(i) = capacity.windows(2).position(|w| w[1] < w[0]) {
            return Err(invalid(format!("capacity decreases at sample {}", i + 1)));
        }
        if let Some(i) = voltage.windows(2).position(|w| w[1] <= w[0]) {
            return Err(invalid(format!("voltage not strictly increasing at sample {}", i + 1)));
        }
        if let Some(s) = soh {
            if !(s > 0.0 && s <= 1.2) {
                return Err(invalid(format!("SOH label {s} outside (0, 1.2]")));
            }
        }
        Ok(Self {
            source_id,
            cycle,
            capacity,
            voltage,
            temperature,
            c_rate,
            soh,
        })
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn cycle(&self) -> u32 {
        self.cycle
    }

    pub fn id(&self) -> SampleId {
        SampleId {
            source_id: self.source_id.clone(),
            cycle: self.cycle,
        }
    }

    pub fn capacity(&self) -> &[f64] {
        &self.capacity
    }

    pub fn voltage(&self) -> &[f64] {
        &self.voltage
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn c_rate(&self) -> f64 {
        self.c_rate
    }

    pub fn soh(&self) -> Option<f64> {
        self.soh
    }

    pub fn len(&self) -> usize {
        self.voltage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltage.is_empty()
    }

    pub fn voltage_range(&self) -> (f64, f64) {
        (self.voltage[0], self.voltage[self.voltage.len() - 1])
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (divisor N - 1).
pub(crate) fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}
