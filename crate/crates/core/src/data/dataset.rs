use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use super::{QvProfile, MIN_PROFILE_SAMPLES};
use crate::error::{Error, Result};

/// Column names of the dataset CSV. Every name is user-configurable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSchema {
    pub source_id: String,
    pub cycle: String,
    pub capacity: String,
    pub voltage: String,
    pub temperature: String,
    pub c_rate: String,
    /// Label column; a dataset without it loads as unlabeled profiles.
    pub soh: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            source_id: "source_id".into(),
            cycle: "cycle".into(),
            capacity: "capacity_ah".into(),
            voltage: "voltage_v".into(),
            temperature: "temperature_c".into(),
            c_rate: "c_rate".into(),
            soh: "soh".into(),
        }
    }
}

/// What the cleaning pass did to one profile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileCleaning {
    pub source_id: String,
    pub cycle: u32,
    pub raw_rows: usize,
    pub duplicates_collapsed: usize,
    pub rows_dropped: usize,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub profiles: Vec<QvProfile>,
    pub cleaning: Vec<ProfileCleaning>,
}

#[derive(Default)]
struct RawProfile {
    rows: Vec<(f64, f64)>,
    temperature: Vec<f64>,
    c_rate: Vec<f64>,
    soh: Option<f64>,
}

/// Reads a dataset CSV and groups rows into profiles by `(source_id, cycle)`.
///
/// Rows of each profile are ordered by charged capacity, samples sharing a
/// voltage are collapsed to their mean capacity, and any remaining sample
/// whose voltage does not exceed the previous kept one is dropped. Profiles
/// come back sorted by key.
pub fn load_dataset(path: &Path, schema: &ColumnSchema) -> Result<LoadReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(Error::Schema(format!("{}: missing header row", path.display())));
    }
    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| {
        find(name).ok_or_else(|| Error::Schema(format!("missing column `{name}` in {}", path.display())))
    };
    let c_src = require(&schema.source_id)?;
    let c_cycle = require(&schema.cycle)?;
    let c_q = require(&schema.capacity)?;
    let c_v = require(&schema.voltage)?;
    let c_t = require(&schema.temperature)?;
    let c_c = require(&schema.c_rate)?;
    let c_soh = find(&schema.soh);

    let mut groups: BTreeMap<(String, u32), RawProfile> = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |col: usize| record.get(col).unwrap_or("");
        let number = |col: usize| -> Result<f64> {
            field(col).parse::<f64>().map_err(|_| {
                Error::Schema(format!(
                    "row {}: column `{}` is not a number: {:?}",
                    line + 2,
                    &headers[col],
                    field(col)
                ))
            })
        };
        let cycle: u32 = field(c_cycle)
            .parse()
            .map_err(|_| Error::Schema(format!("row {}: bad cycle {:?}", line + 2, field(c_cycle))))?;
        let entry = groups.entry((field(c_src).to_string(), cycle)).or_default();
        entry.rows.push((number(c_q)?, number(c_v)?));
        entry.temperature.push(number(c_t)?);
        entry.c_rate.push(number(c_c)?);
        if let Some(col) = c_soh {
            if !field(col).is_empty() && entry.soh.is_none() {
                entry.soh = Some(number(col)?);
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::Schema(format!("{}: no data rows", path.display())));
    }

    let mut profiles = Vec::with_capacity(groups.len());
    let mut cleaning = Vec::with_capacity(groups.len());
    let mut too_short = Vec::new();
    for ((source_id, cycle), raw) in groups {
        let raw_rows = raw.rows.len();
        let (capacity, voltage, duplicates_collapsed, rows_dropped) = clean_rows(raw.rows);
        cleaning.push(ProfileCleaning {
            source_id: source_id.clone(),
            cycle,
            raw_rows,
            duplicates_collapsed,
            rows_dropped,
        });
        if capacity.len() < MIN_PROFILE_SAMPLES {
            too_short.push(format!("{source_id}#{cycle}"));
            continue;
        }
        let temperature = super::mean(&raw.temperature);
        let c_rate = super::mean(&raw.c_rate);
        profiles.push(QvProfile::new(
            source_id, cycle, capacity, voltage, temperature, c_rate, raw.soh,
        )?);
    }
    if !too_short.is_empty() {
        return Err(Error::ProfileTooShort {
            source_ids: too_short,
            min: MIN_PROFILE_SAMPLES,
        });
    }
    Ok(LoadReport { profiles, cleaning })
}

/// Returns (capacity, voltage, collapsed duplicates, dropped rows).
pub(crate) fn clean_rows(mut rows: Vec<(f64, f64)>) -> (Vec<f64>, Vec<f64>, usize, usize) {
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    // Collapse equal voltages to their mean capacity, keeping the first position.
    let mut by_voltage: BTreeMap<u64, (usize, f64, usize)> = BTreeMap::new();
    for (pos, &(q, v)) in rows.iter().enumerate() {
        let e = by_voltage.entry(v.to_bits()).or_insert((pos, 0.0, 0));
        e.1 += q;
        e.2 += 1;
    }
    let duplicates = rows.len() - by_voltage.len();
    let mut collapsed: Vec<(usize, f64, f64)> = by_voltage
        .into_iter()
        .map(|(bits, (pos, sum, n))| (pos, sum / n as f64, f64::from_bits(bits)))
        .collect();
    collapsed.sort_by_key(|c| c.0);

    let mut capacity = Vec::with_capacity(collapsed.len());
    let mut voltage: Vec<f64> = Vec::with_capacity(collapsed.len());
    let mut dropped = 0;
    for (_, q, v) in collapsed {
        let ok = match (capacity.last(), voltage.last()) {
            (Some(&pq), Some(&pv)) => v > pv && q >= pq,
            _ => true,
        };
        if ok {
            capacity.push(q);
            voltage.push(v);
        } else {
            dropped += 1;
        }
    }
    (capacity, voltage, duplicates, dropped)
}

/// Writes profiles in the dataset CSV format with the default column names.
pub fn write_dataset(path: &Path, profiles: &[QvProfile]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    let s = ColumnSchema::default();
    w.write_record([
        &s.source_id,
        &s.cycle,
        &s.capacity,
        &s.voltage,
        &s.temperature,
        &s.c_rate,
        &s.soh,
    ])?;
    for p in profiles {
        let soh = p.soh().map(|v| v.to_string()).unwrap_or_default();
        for (q, v) in p.capacity().iter().zip(p.voltage()) {
            w.write_record([
                p.source_id().to_string(),
                p.cycle().to_string(),
                q.to_string(),
                v.to_string(),
                p.temperature().to_string(),
                p.c_rate().to_string(),
                soh.clone(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn map_csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Schema(format!("{other:?}")),
        }
    } else {
        Error::Csv(e)
    }
}
