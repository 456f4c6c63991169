//! Synthetic aging data for modules of parallel-connected cells.
//!
//! Cells follow a phenomenological open-circuit curve: charged capacity is a
//! weighted sum of logistic steps in voltage, so the IC curve is a sum of
//! bell-shaped peaks. Cells in a module share the terminal voltage and split
//! the charging current in proportion to their capacity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{clean_rows, QvProfile};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    /// Ah.
    pub capacity: f64,
    /// Open-circuit voltages of the IC peaks, V.
    pub peak_centers: Vec<f64>,
    /// Logistic scale of each step, V.
    pub peak_widths: Vec<f64>,
    /// Capacity fraction carried by each step; sums to 1.
    pub peak_weights: Vec<f64>,
    /// Ohm.
    pub resistance: f64,
}

impl CellSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(format!("cell spec: {msg}")));
        if !(self.capacity > 0.0 && self.capacity.is_finite()) {
            return bad(format!("capacity {} must be positive", self.capacity));
        }
        let n = self.peak_centers.len();
        if n == 0 || self.peak_widths.len() != n || self.peak_weights.len() != n {
            return bad("peak centers, widths and weights must be non-empty and of equal length".into());
        }
        if self.peak_widths.iter().any(|w| !(*w > 0.0)) {
            return bad("peak widths must be positive".into());
        }
        if self.peak_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("peak weights must be non-negative".into());
        }
        let total: f64 = self.peak_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("peak weights sum to {total}, expected 1"));
        }
        if !(self.resistance >= 0.0) || self.peak_centers.iter().any(|c| !c.is_finite()) {
            return bad("resistance and centers must be finite, resistance non-negative".into());
        }
        Ok(())
    }

    /// Open-circuit charged capacity at voltage `v`.
    pub fn charge(&self, v: f64) -> f64 {
        self.steps(v).map(|(w, s, _)| w * logistic(s)).sum::<f64>() * self.capacity
    }

    /// Open-circuit incremental capacity dQ/dV at `v`.
    pub fn incremental_capacity(&self, v: f64) -> f64 {
        self.steps(v)
            .map(|(w, s, width)| {
                let p = logistic(s);
                w * p * (1.0 - p) / width
            })
            .sum::<f64>()
            * self.capacity
    }

    fn steps(&self, v: f64) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.peak_centers
            .iter()
            .zip(&self.peak_widths)
            .zip(&self.peak_weights)
            .map(move |((c, w), wt)| (*wt, (v - c) / w, *w))
    }

    /// The cell after losing `fade` of its capacity, with every peak shifted
    /// up by `shift_per_fade * fade` volts.
    pub fn aged(&self, fade: f64, shift_per_fade: f64) -> Self {
        Self {
            capacity: self.capacity * (1.0 - fade),
            peak_centers: self.peak_centers.iter().map(|c| c + shift_per_fade * fade).collect(),
            ..self.clone()
        }
    }
}

impl Default for CellSpec {
    /// A three-plateau cell of 69 Ah.
    fn default() -> Self {
        Self {
            capacity: 69.0,
            peak_centers: vec![3.55, 3.68, 3.92],
            peak_widths: vec![0.02, 0.03, 0.05],
            peak_weights: vec![0.25, 0.35, 0.40],
            resistance: 1e-3,
        }
    }
}

fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Charged capacity as a function of voltage for a single cell.
pub fn synth_cell_curve(spec: &CellSpec) -> Result<impl Fn(f64) -> f64 + '_> {
    spec.validate()?;
    Ok(move |v| spec.charge(v))
}

/// Charging conditions and sampling of one synthetic profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeProtocol {
    /// Module current, A.
    pub current: f64,
    /// Terminal voltage window of the recorded charge.
    pub v_start: f64,
    pub v_end: f64,
    /// Samples on a uniform charged-capacity grid.
    pub n_samples: usize,
    pub noise_sigma_v: f64,
    pub temperature_c: f64,
}

/// Terminal-voltage charge curve of parallel cells.
///
/// At terminal voltage `v` each cell sits at open-circuit `v - I_c * R_c`
/// with `I_c = current * C_c / sum(C)`.
#[derive(Debug, Clone)]
pub struct ModuleCurve<'a> {
    cells: &'a [CellSpec],
    offsets: Vec<f64>,
}

impl<'a> ModuleCurve<'a> {
    pub fn new(cells: &'a [CellSpec], current: f64) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Argument("a module needs at least one cell".into()));
        }
        for c in cells {
            c.validate()?;
        }
        let total: f64 = cells.iter().map(|c| c.capacity).sum();
        let offsets = cells.iter().map(|c| current * c.capacity / total * c.resistance).collect();
        Ok(Self { cells, offsets })
    }

    pub fn charge(&self, v: f64) -> f64 {
        self.cells.iter().zip(&self.offsets).map(|(c, o)| c.charge(v - o)).sum()
    }

    pub fn incremental_capacity(&self, v: f64) -> f64 {
        self.cells
            .iter()
            .zip(&self.offsets)
            .map(|(c, o)| c.incremental_capacity(v - o))
            .sum()
    }

    /// Voltage at which the module has charged `q`, by bisection on `[lo, hi]`.
    pub fn voltage_at(&self, q: f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.charge(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Samples the module charge curve on a uniform capacity grid between the
/// protocol's voltage limits. Capacity is reported relative to the start of
/// the charge. Gaussian noise is added to each voltage reading; the noisy
/// readings are reported in increasing order, as a monotone logger would.
pub fn synth_module_profile(
    cells: &[CellSpec],
    protocol: &ChargeProtocol,
    seed: u64,
    source_id: &str,
    cycle: u32,
    soh: Option<f64>,
) -> Result<QvProfile> {
    let curve = ModuleCurve::new(cells, protocol.current)?;
    if !(protocol.v_end > protocol.v_start) || protocol.n_samples < 2 {
        return Err(Error::Argument("charge protocol needs v_end > v_start and >= 2 samples".into()));
    }
    let q0 = curve.charge(protocol.v_start);
    let q1 = curve.charge(protocol.v_end);
    let n = protocol.n_samples;
    let mut capacity = Vec::with_capacity(n);
    let mut voltage = Vec::with_capacity(n);
    for i in 0..n {
        let q = q0 + (q1 - q0) * i as f64 / (n - 1) as f64;
        let v = if i == 0 {
            protocol.v_start
        } else if i == n - 1 {
            protocol.v_end
        } else {
            curve.voltage_at(q, protocol.v_start, protocol.v_end)
        };
        capacity.push(q - q0);
        voltage.push(v);
    }
    if protocol.noise_sigma_v > 0.0 {
        let noise = Normal::new(0.0, protocol.noise_sigma_v)
            .map_err(|e| Error::Argument(format!("noise sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in voltage.iter_mut() {
            *v += noise.sample(&mut rng);
        }
        voltage.sort_by(f64::total_cmp);
    }
    let (capacity, voltage, _, _) = clean_rows(capacity.into_iter().zip(voltage).collect());
    QvProfile::new(
        source_id,
        cycle,
        capacity,
        voltage,
        protocol.temperature_c,
        protocol.current / cells.iter().map(|c| c.capacity).sum::<f64>(),
        soh,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgingSpec {
    pub n_modules: usize,
    pub cells_per_module: usize,
    pub n_checkpoints: usize,
    /// Nominal module SOH at the last checkpoint.
    pub soh_end: f64,
    /// Coefficient of variation of each cell's fade rate.
    pub variation_cv: f64,
    /// Peak shift in volts per unit of capacity fraction lost.
    pub peak_shift_per_fade: f64,
    pub noise_sigma_v: f64,
    pub seed: u64,
    /// Charge current as a multiple of the fresh module capacity.
    pub c_rate: f64,
    pub temperature_c: f64,
    pub v_start: f64,
    pub v_end: f64,
    pub n_samples: usize,
}

impl Default for AgingSpec {
    fn default() -> Self {
        Self {
            n_modules: 12,
            cells_per_module: 3,
            n_checkpoints: 20,
            soh_end: 0.86,
            variation_cv: 0.03,
            peak_shift_per_fade: 0.3,
            noise_sigma_v: 1e-3,
            seed: 1,
            c_rate: 0.33,
            temperature_c: 25.0,
            v_start: 3.40,
            v_end: 4.10,
            n_samples: 200,
        }
    }
}

impl AgingSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Argument(format!("aging spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Argument(format!("aging spec: {msg}")));
        if !(self.soh_end > 0.0 && self.soh_end < 1.0) {
            return bad("soh_end must lie in (0, 1)");
        }
        if !(self.variation_cv >= 0.0) {
            return bad("variation_cv must be non-negative");
        }
        if self.n_checkpoints < 2 {
            return bad("need at least two checkpoints");
        }
        if self.n_modules == 0 || self.cells_per_module == 0 {
            return bad("need at least one module and one cell per module");
        }
        if !(self.noise_sigma_v >= 0.0) || !(self.c_rate > 0.0) {
            return bad("noise must be non-negative and c_rate positive");
        }
        if !(self.v_end > self.v_start) || self.n_samples < crate::data::MIN_PROFILE_SAMPLES {
            return bad("voltage window must be increasing with enough samples");
        }
        Ok(())
    }
}

/// Per-cell capacity at one checkpoint of one module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTruth {
    pub module_id: String,
    pub checkpoint: u32,
    pub cell_index: usize,
    pub cell_capacity_ah: f64,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub profiles: Vec<QvProfile>,
    pub truth: Vec<CellTruth>,
}

/// Nominal fade fraction at checkpoint `t` of `n`: logarithmic in time,
/// reaching `1 - soh_end` at the last checkpoint.
fn nominal_fade(t: usize, n: usize, soh_end: f64) -> f64 {
    let s = t as f64 / (n - 1) as f64;
    (1.0 - soh_end) * (1.0 + 9.0 * s).ln() / 10f64.ln()
}

/// Generates `n_modules * n_checkpoints` labeled profiles.
///
/// Each cell draws a fade-rate multiplier `m` (log-normal, mean 1, CV =
/// `variation_cv`) once, and at checkpoint `t` has lost `m * fade(t)` of its
/// capacity. The label is the module capacity over the fresh module capacity.
pub fn synth_dataset(aging: &AgingSpec, base: &CellSpec) -> Result<SynthDataset> {
    aging.validate()?;
    base.validate()?;
    let sigma = (1.0 + aging.variation_cv * aging.variation_cv).ln().sqrt();
    let mut profiles = Vec::with_capacity(aging.n_modules * aging.n_checkpoints);
    let mut truth = Vec::new();
    let fresh_total = base.capacity * aging.cells_per_module as f64;
    for m in 0..aging.n_modules {
        let module_id = format!("module_{:03}", m + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(aging.seed);
        rng.set_stream(2 * m as u64);
        let rates: Vec<f64> = (0..aging.cells_per_module)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (sigma * z - 0.5 * sigma * sigma).exp()
            })
            .collect();
        let noise_seed: u64 = rng.random();
        for t in 0..aging.n_checkpoints {
            let fade = nominal_fade(t, aging.n_checkpoints, aging.soh_end);
            let cells: Vec<CellSpec> = rates
                .iter()
                .map(|r| base.aged((r * fade).min(0.95), aging.peak_shift_per_fade))
                .collect();
            let total: f64 = cells.iter().map(|c| c.capacity).sum();
            let protocol = ChargeProtocol {
                current: aging.c_rate * fresh_total,
                v_start: aging.v_start,
                v_end: aging.v_end,
                n_samples: aging.n_samples,
                noise_sigma_v: aging.noise_sigma_v,
                temperature_c: aging.temperature_c,
            };
            let mut profile = synth_module_profile(
                &cells,
                &protocol,
                noise_seed.wrapping_add(t as u64),
                &module_id,
                t as u32,
                Some(total / fresh_total),
            )?;
            // The charging C-rate is quoted against the fresh module.
            profile = QvProfile::new(
                module_id.clone(),
                t as u32,
                profile.capacity().to_vec(),
                profile.voltage().to_vec(),
                aging.temperature_c,
                aging.c_rate,
                profile.soh(),
            )?;
            profiles.push(profile);
            truth.extend(cells.iter().enumerate().map(|(i, c)| CellTruth {
                module_id: module_id.clone(),
                checkpoint: t as u32,
                cell_index: i,
                cell_capacity_ah: c.capacity,
            }));
        }
    }
    Ok(SynthDataset { profiles, truth })
}

/// Writes the ground-truth CSV (module_id, checkpoint, cell_index, cell_capacity_ah).
pub fn write_truth(path: &std::path::Path, truth: &[CellTruth]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::data::map_csv_io(path, e))?;
    for row in truth {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
