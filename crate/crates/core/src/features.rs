//! Feature extraction from fitted IC/DV curves.
//!
//! Every feature is read off one fitted [`IcDvCurve`]. DV extrema are not
//! searched separately: `DV(Q) = 1 / IC(V(Q))`, so DV peaks sit at IC valleys
//! and DV valleys at IC peaks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvefit::{fit_qv, FitConfig, IcDvCurve};
use crate::data::{map_csv_io, FeatureTable, QvProfile, SampleId};
use crate::error::{Error, Result};

pub const MIN_GRID_SIZE: usize = 64;
/// Extrema closer than this fraction of the voltage range to either end are
/// discarded.
pub const BOUNDARY_FRACTION: f64 = 0.01;
pub const GOLDEN_TOL: f64 = 1e-5;
pub const SIMPSON_TOL: f64 = 1e-6;
const IC_SINGULAR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureKind {
    IcPh,
    IcPl,
    IcVh,
    IcVl,
    DvPh,
    DvPl,
    DvVh,
    DvVl,
    IcAr,
    IcPa,
    Temp,
    CRate,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 12] = [
        FeatureKind::IcPh,
        FeatureKind::IcPl,
        FeatureKind::IcVh,
        FeatureKind::IcVl,
        FeatureKind::DvPh,
        FeatureKind::DvPl,
        FeatureKind::DvVh,
        FeatureKind::DvVl,
        FeatureKind::IcAr,
        FeatureKind::IcPa,
        FeatureKind::Temp,
        FeatureKind::CRate,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            FeatureKind::IcPh => "IC_PH",
            FeatureKind::IcPl => "IC_PL",
            FeatureKind::IcVh => "IC_VH",
            FeatureKind::IcVl => "IC_VL",
            FeatureKind::DvPh => "DV_PH",
            FeatureKind::DvPl => "DV_PL",
            FeatureKind::DvVh => "DV_VH",
            FeatureKind::DvVl => "DV_VL",
            FeatureKind::IcAr => "IC_AR",
            FeatureKind::IcPa => "IC_PA",
            FeatureKind::Temp => "TEMP",
            FeatureKind::CRate => "C_RATE",
        }
    }

    fn indexed(self) -> bool {
        !matches!(self, FeatureKind::Temp | FeatureKind::CRate)
    }
}

/// One named feature value. `index` is 1-based and 0 for TEMP and C_RATE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveFeature {
    pub kind: FeatureKind,
    pub index: usize,
    pub value: f64,
}

impl CurveFeature {
    pub fn name(&self) -> String {
        feature_name(self.kind, self.index)
    }
}

pub fn feature_name(kind: FeatureKind, index: usize) -> String {
    if kind.indexed() {
        format!("{}_{index}", kind.prefix())
    } else {
        kind.prefix().to_string()
    }
}

/// Parses a catalog name such as `IC_PH_2` or `TEMP`.
pub fn parse_feature_name(name: &str) -> Option<(FeatureKind, usize)> {
    FeatureKind::ALL.iter().find_map(|&kind| {
        let prefix = kind.prefix();
        if !kind.indexed() {
            return (name == prefix).then_some((kind, 0));
        }
        let k: usize = name.strip_prefix(prefix)?.strip_prefix('_')?.parse().ok()?;
        (k >= 1).then_some((kind, k))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Ic,
    Dv,
}

/// A stationary point: abscissa (V for IC, Ah from the start of the curve for
/// DV) and curve height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extremum {
    pub location: f64,
    pub height: f64,
}

/// Peaks and valleys ordered by location. Valleys lie between consecutive
/// peaks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Extrema {
    pub peaks: Vec<Extremum>,
    pub valleys: Vec<Extremum>,
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Height of each grid maximum above the higher of its two bases.
fn prominence(y: &[f64], i: usize) -> f64 {
    let mut left = y[i];
    for &v in y[..i].iter().rev() {
        if v > y[i] {
            break;
        }
        left = left.min(v);
    }
    let mut right = y[i];
    for &v in &y[i + 1..] {
        if v > y[i] {
            break;
        }
        right = right.min(v);
    }
    y[i] - left.max(right)
}

/// A grid maximum of IC after refinement, with its prominence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakCandidate {
    pub peak: Extremum,
    pub prominence: f64,
}

/// Interior IC maxima whose prominence is at least `min_prominence` times
/// the IC range on the grid, ordered by location.
pub fn ic_peak_candidates(curve: &IcDvCurve, grid_size: usize, min_prominence: f64) -> Result<Vec<PeakCandidate>> {
    if grid_size < MIN_GRID_SIZE {
        return Err(Error::Argument(format!(
            "extremum grid needs at least {MIN_GRID_SIZE} points, got {grid_size}"
        )));
    }
    if !(0.0..1.0).contains(&min_prominence) {
        return Err(Error::Argument(format!(
            "relative prominence {min_prominence} outside [0, 1)"
        )));
    }
    let grid = curve.grid(grid_size);
    let y: Vec<f64> = grid.iter().map(|&v| curve.ic_at(v)).collect();
    let (v0, v1) = curve.v_range;
    let margin = BOUNDARY_FRACTION * (v1 - v0);
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = min_prominence * (hi - lo);

    let mut out = Vec::new();
    for i in 1..grid_size - 1 {
        if !(y[i] > y[i - 1] && y[i] >= y[i + 1]) {
            continue;
        }
        let prominence = prominence(&y, i);
        if prominence <= threshold {
            continue;
        }
        let v = golden_max(|v| curve.ic_at(v), grid[i - 1], grid[i + 1], GOLDEN_TOL);
        if v >= v0 + margin && v <= v1 - margin {
            out.push(PeakCandidate {
                peak: Extremum {
                    location: v,
                    height: curve.ic_at(v),
                },
                prominence,
            });
        }
    }
    Ok(out)
}

/// Keeps at most `max_peaks` of the most prominent candidates (all when
/// `None`), ordered by location, and finds the IC minimum between each pair
/// of consecutive peaks.
pub fn select_extrema(
    curve: &IcDvCurve,
    candidates: &[PeakCandidate],
    max_peaks: Option<usize>,
    grid_size: usize,
) -> Extrema {
    let mut kept = candidates.to_vec();
    if let Some(k) = max_peaks {
        kept.sort_by(|a, b| {
            b.prominence
                .total_cmp(&a.prominence)
                .then(b.peak.height.total_cmp(&a.peak.height))
        });
        kept.truncate(k);
    }
    let mut peaks: Vec<Extremum> = kept.into_iter().map(|c| c.peak).collect();
    peaks.sort_by(|a, b| a.location.total_cmp(&b.location));

    let grid = curve.grid(grid_size.max(3));
    let mut valleys = Vec::new();
    for pair in peaks.windows(2) {
        let j = (1..grid.len() - 1)
            .filter(|&j| grid[j] > pair[0].location && grid[j] < pair[1].location)
            .min_by(|&a, &b| curve.ic_at(grid[a]).total_cmp(&curve.ic_at(grid[b])));
        if let Some(j) = j {
            let v = golden_max(|v| -curve.ic_at(v), grid[j - 1], grid[j + 1], GOLDEN_TOL);
            valleys.push(Extremum {
                location: v,
                height: curve.ic_at(v),
            });
        }
    }
    Extrema { peaks, valleys }
}

/// IC extrema of a fitted curve: [`ic_peak_candidates`] followed by
/// [`select_extrema`].
pub fn find_ic_extrema(
    curve: &IcDvCurve,
    grid_size: usize,
    min_prominence: f64,
    max_peaks: Option<usize>,
) -> Result<Extrema> {
    let candidates = ic_peak_candidates(curve, grid_size, min_prominence)?;
    Ok(select_extrema(curve, &candidates, max_peaks, grid_size))
}

/// DV point matching the IC stationary point at voltage `v`: capacity since
/// the start of the curve and `1 / IC`.
fn dv_point(curve: &IcDvCurve, e: &Extremum) -> Result<Extremum> {
    if e.height.abs() < IC_SINGULAR {
        return Err(Error::DerivativeSingularity {
            capacity: curve.charge_at(e.location),
        });
    }
    Ok(Extremum {
        location: curve.charge_at(e.location) - curve.q_range.0,
        height: 1.0 / e.height,
    })
}

/// Peaks and valleys of the IC or DV curve, with the default relative
/// prominence of 5%.
pub fn find_extrema(curve: &IcDvCurve, which: CurveKind, grid_size: usize) -> Result<Extrema> {
    let ic = find_ic_extrema(curve, grid_size, DEFAULT_PROMINENCE, None)?;
    match which {
        CurveKind::Ic => Ok(ic),
        CurveKind::Dv => Ok(Extrema {
            peaks: ic.valleys.iter().map(|e| dv_point(curve, e)).collect::<Result<_>>()?,
            valleys: ic.peaks.iter().map(|e| dv_point(curve, e)).collect::<Result<_>>()?,
        }),
    }
}

/// Areas under the IC curve between `v_min`, each valley and `v_max`,
/// computed as differences of the fitted charge.
pub fn ic_peak_areas(curve: &IcDvCurve, valleys: &[f64]) -> Result<Vec<f64>> {
    let (v0, v1) = curve.v_range;
    for &v in valleys {
        if !(v > v0 && v < v1) {
            return Err(Error::Range {
                value: v,
                min: v0,
                max: v1,
            });
        }
    }
    if valleys.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("valley locations must be strictly increasing".into()));
    }
    let mut edges = vec![v0];
    edges.extend_from_slice(valleys);
    edges.push(v1);
    Ok(edges
        .windows(2)
        .map(|w| curve.charge_at(w[1]) - curve.charge_at(w[0]))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartialAreaMode {
    /// Area of IC above a horizontal line, in Ah/V.
    CutoffLine { cutoff: f64 },
    /// Charge within `peak ± half_width` volts.
    VoltageWindow { half_width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialAreaSpec {
    #[serde(flatten)]
    pub mode: PartialAreaMode,
    /// 1-based peak rank by location; `None` targets the highest peak.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_peak: Option<usize>,
}

impl PartialAreaSpec {
    pub fn window(half_width: f64) -> Self {
        Self {
            mode: PartialAreaMode::VoltageWindow { half_width },
            target_peak: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            PartialAreaMode::CutoffLine { cutoff } if !(cutoff >= 0.0 && cutoff.is_finite()) => {
                Err(Error::Argument(format!("partial-area cutoff {cutoff} must be >= 0")))
            }
            PartialAreaMode::VoltageWindow { half_width } if !(half_width > 0.0 && half_width.is_finite()) => Err(
                Error::Argument(format!("partial-area half width {half_width} must be > 0")),
            ),
            _ if self.target_peak == Some(0) => Err(Error::Argument("peak indices start at 1".into())),
            _ => Ok(()),
        }
    }

    /// The targeted peak, if the curve has it.
    pub fn target<'a>(&self, peaks: &'a [Extremum]) -> Option<&'a Extremum> {
        match self.target_peak {
            Some(k) => peaks.get(k.checked_sub(1)?),
            None => peaks.iter().max_by(|a, b| a.height.total_cmp(&b.height)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartialArea {
    pub value: f64,
    /// Set when the cutoff is at or above the peak and the area is zero.
    pub below_cutoff: bool,
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(a, m, fa, flm, fm);
        let right = simpson(m, b, fm, frm, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = simpson(a, b, fa, fm, fb);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Where IC first drops to `cutoff` walking from `p` towards `end`.
fn cutoff_crossing(curve: &IcDvCurve, p: f64, end: f64, cutoff: f64) -> f64 {
    let step = (curve.v_range.1 - curve.v_range.0) / 2048.0;
    let dir = if end > p { 1.0 } else { -1.0 };
    let mut inside = p;
    loop {
        let next = inside + dir * step;
        if (next - end) * dir >= 0.0 {
            if curve.ic_at(end) > cutoff {
                return end;
            }
            return bisect_crossing(curve, inside, end, cutoff);
        }
        if curve.ic_at(next) <= cutoff {
            return bisect_crossing(curve, inside, next, cutoff);
        }
        inside = next;
    }
}

fn bisect_crossing(curve: &IcDvCurve, mut inside: f64, mut outside: f64, cutoff: f64) -> f64 {
    for _ in 0..100 {
        let mid = 0.5 * (inside + outside);
        if (outside - inside).abs() < 1e-13 {
            break;
        }
        if curve.ic_at(mid) > cutoff {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    0.5 * (inside + outside)
}

/// Partial area under the targeted IC peak.
pub fn ic_partial_area(curve: &IcDvCurve, spec: &PartialAreaSpec, peaks: &[Extremum]) -> Result<PartialArea> {
    spec.validate()?;
    let peak = spec
        .target(peaks)
        .ok_or_else(|| Error::Domain("targeted IC peak does not exist".into()))?;
    let (v0, v1) = curve.v_range;
    let p = peak.location;
    match spec.mode {
        PartialAreaMode::VoltageWindow { half_width } => {
            let (a, b) = ((p - half_width).max(v0), (p + half_width).min(v1));
            if a >= b {
                return Err(Error::Range {
                    value: p,
                    min: v0,
                    max: v1,
                });
            }
            Ok(PartialArea {
                value: curve.charge_at(b) - curve.charge_at(a),
                below_cutoff: false,
            })
        }
        PartialAreaMode::CutoffLine { cutoff } => {
            if curve.ic_at(p) <= cutoff {
                return Ok(PartialArea {
                    value: 0.0,
                    below_cutoff: true,
                });
            }
            let a = cutoff_crossing(curve, p, v0, cutoff);
            let b = cutoff_crossing(curve, p, v1, cutoff);
            let f = |v: f64| (curve.ic_at(v) - cutoff).max(0.0);
            let value = adaptive_simpson(&f, a, p, 0.5 * SIMPSON_TOL) + adaptive_simpson(&f, p, b, 0.5 * SIMPSON_TOL);
            Ok(PartialArea {
                value,
                below_cutoff: false,
            })
        }
    }
}

pub const DEFAULT_GRID_SIZE: usize = 512;
pub const DEFAULT_PROMINENCE: f64 = 0.05;
pub const DEFAULT_WINDOW_HALF_WIDTH: f64 = 0.025;

/// Which feature families to emit and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub fit: FitConfig,
    pub grid_size: usize,
    /// Minimum peak prominence relative to the IC range.
    pub min_prominence: f64,
    pub ic_peaks: bool,
    pub ic_valleys: bool,
    pub dv_peaks: bool,
    pub dv_valleys: bool,
    pub ic_areas: bool,
    pub partial_areas: Vec<PartialAreaSpec>,
    /// Number of IC peaks to keep, the most prominent first. Unset means
    /// the fresh-state count of a batch, or every peak for a single profile.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_peaks: Option<usize>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            grid_size: DEFAULT_GRID_SIZE,
            min_prominence: DEFAULT_PROMINENCE,
            ic_peaks: true,
            ic_valleys: true,
            dv_peaks: true,
            dv_valleys: true,
            ic_areas: true,
            partial_areas: vec![PartialAreaSpec::window(DEFAULT_WINDOW_HALF_WIDTH)],
            expected_peaks: None,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < MIN_GRID_SIZE {
            return Err(Error::Argument(format!(
                "grid_size must be at least {MIN_GRID_SIZE}, got {}",
                self.grid_size
            )));
        }
        if !(0.0..1.0).contains(&self.min_prominence) {
            return Err(Error::Argument(format!(
                "min_prominence {} outside [0, 1)",
                self.min_prominence
            )));
        }
        if self.expected_peaks == Some(0) {
            return Err(Error::Argument("expected_peaks must be at least 1".into()));
        }
        self.partial_areas.iter().try_for_each(PartialAreaSpec::validate)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Argument(format!("extraction config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// A fitted profile with its candidate IC peaks, before the number of peaks
/// is fixed.
#[derive(Debug, Clone)]
pub struct FittedProfile {
    pub id: SampleId,
    pub soh: Option<f64>,
    pub temperature: f64,
    pub c_rate: f64,
    pub curve: IcDvCurve,
    pub candidates: Vec<PeakCandidate>,
}

pub fn fit_profile(profile: &QvProfile, config: &ExtractionConfig) -> Result<FittedProfile> {
    config.validate()?;
    let curve = fit_qv(profile, &config.fit)?;
    let candidates = ic_peak_candidates(&curve, config.grid_size, config.min_prominence)?;
    Ok(FittedProfile {
        id: profile.id(),
        soh: profile.soh(),
        temperature: profile.temperature(),
        c_rate: profile.c_rate(),
        curve,
        candidates,
    })
}

/// Everything extracted from one profile.
#[derive(Debug, Clone)]
pub struct ProfileFeatures {
    pub id: SampleId,
    pub soh: Option<f64>,
    pub curve: IcDvCurve,
    pub extrema: Extrema,
    pub features: Vec<CurveFeature>,
    /// Notes on features that could not be computed.
    pub flags: Vec<String>,
}

impl ProfileFeatures {
    pub fn get(&self, kind: FeatureKind, index: usize) -> Option<f64> {
        self.features
            .iter()
            .find(|f| f.kind == kind && f.index == index)
            .map(|f| f.value)
    }

    /// The highest IC peak.
    pub fn dominant_peak(&self) -> Option<&Extremum> {
        self.extrema.peaks.iter().max_by(|a, b| a.height.total_cmp(&b.height))
    }
}

/// Emits every enabled feature of a fitted profile, keeping at most
/// `max_peaks` IC peaks. Extrema are numbered by location.
pub fn features_from_fit(fit: FittedProfile, config: &ExtractionConfig, max_peaks: Option<usize>) -> Result<ProfileFeatures> {
    let FittedProfile {
        id,
        soh,
        temperature,
        c_rate,
        curve,
        candidates,
    } = fit;
    let extrema = select_extrema(&curve, &candidates, max_peaks, config.grid_size);
    let mut features = Vec::new();
    let mut flags = Vec::new();
    let mut push = |kind, index, value| features.push(CurveFeature { kind, index, value });

    for (k, e) in extrema.peaks.iter().enumerate() {
        if config.ic_peaks {
            push(FeatureKind::IcPh, k + 1, e.height);
            push(FeatureKind::IcPl, k + 1, e.location);
        }
        if config.dv_valleys {
            match dv_point(&curve, e) {
                Ok(d) => {
                    push(FeatureKind::DvVh, k + 1, d.height);
                    push(FeatureKind::DvVl, k + 1, d.location);
                }
                Err(err) => flags.push(format!("DV valley {}: {err}", k + 1)),
            }
        }
    }
    for (k, e) in extrema.valleys.iter().enumerate() {
        if config.ic_valleys {
            push(FeatureKind::IcVh, k + 1, e.height);
            push(FeatureKind::IcVl, k + 1, e.location);
        }
        if config.dv_peaks {
            match dv_point(&curve, e) {
                Ok(d) => {
                    push(FeatureKind::DvPh, k + 1, d.height);
                    push(FeatureKind::DvPl, k + 1, d.location);
                }
                Err(err) => flags.push(format!("DV peak {}: {err}", k + 1)),
            }
        }
    }
    if config.ic_areas {
        let valleys: Vec<f64> = extrema.valleys.iter().map(|e| e.location).collect();
        for (k, a) in ic_peak_areas(&curve, &valleys)?.into_iter().enumerate() {
            push(FeatureKind::IcAr, k + 1, a);
        }
    }
    for (k, spec) in config.partial_areas.iter().enumerate() {
        match ic_partial_area(&curve, spec, &extrema.peaks) {
            Ok(a) => {
                if a.below_cutoff {
                    flags.push(format!("IC_PA_{}: cutoff at or above the peak", k + 1));
                }
                push(FeatureKind::IcPa, k + 1, a.value);
            }
            Err(err) => flags.push(format!("IC_PA_{}: {err}", k + 1)),
        }
    }
    push(FeatureKind::Temp, 0, temperature);
    push(FeatureKind::CRate, 0, c_rate);
    features.sort_by_key(|f| (f.kind, f.index));

    Ok(ProfileFeatures {
        id,
        soh,
        curve,
        extrema,
        features,
        flags,
    })
}

/// Fits one profile and extracts its features with the configured peak
/// count.
pub fn extract_features(profile: &QvProfile, config: &ExtractionConfig) -> Result<ProfileFeatures> {
    features_from_fit(fit_profile(profile, config)?, config, config.expected_peaks)
}

/// Flags the samples at the lowest cycle of their source.
pub fn fresh_state<'a>(ids: impl IntoIterator<Item = &'a SampleId> + Clone) -> Vec<bool> {
    let mut first: HashMap<&str, u32> = HashMap::new();
    for id in ids.clone() {
        let c = first.entry(id.source_id.as_str()).or_insert(id.cycle);
        *c = (*c).min(id.cycle);
    }
    ids.into_iter().map(|id| first[id.source_id.as_str()] == id.cycle).collect()
}

/// Most common candidate peak count among fresh-state fits; ties go to the
/// smaller count.
pub fn fresh_peak_count(fits: &[FittedProfile]) -> Option<usize> {
    let fresh = fresh_state(fits.iter().map(|f| &f.id));
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (f, _) in fits.iter().zip(&fresh).filter(|(_, &is)| is) {
        *counts.entry(f.candidates.len()).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(k, _)| k)
}

/// Extracts every profile in parallel; results keep the input order. The
/// peak count is `config.expected_peaks`, or else the fresh-state count of
/// the profiles that fit.
pub fn extract_all(profiles: &[QvProfile], config: &ExtractionConfig) -> Vec<Result<ProfileFeatures>> {
    let fits: Vec<Result<FittedProfile>> = profiles.par_iter().map(|p| fit_profile(p, config)).collect();
    let max_peaks = config.expected_peaks.or_else(|| {
        let ok: Vec<FittedProfile> = fits.iter().filter_map(|f| f.as_ref().ok().cloned()).collect();
        fresh_peak_count(&ok)
    });
    fits.into_par_iter()
        .map(|f| f.and_then(|f| features_from_fit(f, config, max_peaks)))
        .collect()
}

/// The columns of a feature table, fixed once from reference data so that
/// later tables line up with it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    /// IC peaks kept per profile.
    pub n_peaks: usize,
    pub columns: Vec<String>,
}

impl FeatureLayout {
    /// Columns present in at least half of the fresh-state profiles (the
    /// lowest cycle of each source), minus columns that are constant over
    /// `extracted`.
    pub fn from_reference(extracted: &[ProfileFeatures]) -> Result<Self> {
        if extracted.is_empty() {
            return Err(Error::EmptyOutput("no extracted profiles".into()));
        }
        let is_fresh = fresh_state(extracted.iter().map(|p| &p.id));
        let fresh: Vec<&ProfileFeatures> = extracted
            .iter()
            .zip(&is_fresh)
            .filter_map(|(p, &f)| f.then_some(p))
            .collect();
        let n_peaks = extracted.iter().map(|p| p.extrema.peaks.len()).max().unwrap_or(0);
        let mut counts: BTreeMap<(FeatureKind, usize), usize> = BTreeMap::new();
        for p in &fresh {
            for f in &p.features {
                *counts.entry((f.kind, f.index)).or_default() += 1;
            }
        }
        let columns = counts
            .into_iter()
            .filter(|&(_, c)| 2 * c >= fresh.len())
            .map(|((kind, k), _)| feature_name(kind, k))
            .collect();
        let full = Self { n_peaks, columns };
        let table = full.assemble(extracted)?;
        let constant = table.constant_columns();
        let columns: Vec<String> = full.columns.into_iter().filter(|c| !constant.contains(c)).collect();
        if columns.is_empty() {
            return Err(Error::EmptyOutput("every feature column is constant".into()));
        }
        Ok(Self { n_peaks, columns })
    }

    /// Builds the table with this layout's columns, masking features a
    /// profile does not have. Labels are kept only when every profile has one.
    pub fn assemble(&self, extracted: &[ProfileFeatures]) -> Result<FeatureTable> {
        let keys = self
            .columns
            .iter()
            .map(|c| parse_feature_name(c).ok_or_else(|| Error::ModelFormat(format!("unknown feature `{c}`"))))
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::with_capacity(extracted.len());
        let mut mask = Vec::with_capacity(extracted.len());
        for p in extracted {
            let vals: Vec<Option<f64>> = keys.iter().map(|&(kind, k)| p.get(kind, k)).collect();
            mask.push(vals.iter().map(Option::is_some).collect());
            rows.push(vals.iter().map(|v| v.unwrap_or(0.0)).collect());
        }
        let labels: Option<Vec<f64>> = extracted.iter().map(|p| p.soh).collect();
        FeatureTable::with_mask(
            self.columns.clone(),
            extracted.iter().map(|p| p.id.clone()).collect(),
            rows,
            mask,
            labels,
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::ModelFormat(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let layout: Self = toml::from_str(&text).map_err(|e| Error::ModelFormat(format!("{}: {e}", path.display())))?;
        if let Some(bad) = layout.columns.iter().find(|c| parse_feature_name(c).is_none()) {
            return Err(Error::ModelFormat(format!("unknown feature `{bad}`")));
        }
        Ok(layout)
    }
}

/// Writes `source_id, cycle, v, qc_fit, ic, dv` on `n` voltages per curve.
pub fn write_curve_dump(path: &Path, extracted: &[ProfileFeatures], n: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    w.write_record(["source_id", "cycle", "v", "qc_fit", "ic", "dv"])?;
    for p in extracted {
        for s in crate::curvefit::sample_curve(&p.curve, n) {
            w.write_record([
                p.id.source_id.clone(),
                p.id.cycle.to_string(),
                s.v.to_string(),
                s.qc_fit.to_string(),
                s.ic.to_string(),
                s.dv.map(|d| d.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvefit::fit_samples;
    use crate::synth::CellSpec;

    fn two_peak_cell() -> CellSpec {
        CellSpec {
            capacity: 50.0,
            peak_centers: vec![3.55, 3.85],
            peak_widths: vec![0.03, 0.04],
            peak_weights: vec![0.45, 0.55],
            resistance: 0.0,
        }
    }

    fn noiseless_fit(cell: &CellSpec, n: usize) -> IcDvCurve {
        let v: Vec<f64> = (0..n).map(|i| 3.35 + 0.75 * i as f64 / (n - 1) as f64).collect();
        let q: Vec<f64> = v.iter().map(|&x| cell.charge(x)).collect();
        fit_samples(&v, &q, &FitConfig::default()).unwrap()
    }

    fn dense_extrema(f: impl Fn(f64) -> f64, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        let n = 65536;
        let xs: Vec<f64> = (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let mut maxima = Vec::new();
        let mut minima = Vec::new();
        for i in 1..n - 1 {
            if ys[i] > ys[i - 1] && ys[i] >= ys[i + 1] {
                maxima.push(xs[i]);
            }
            if ys[i] < ys[i - 1] && ys[i] <= ys[i + 1] {
                minima.push(xs[i]);
            }
        }
        (maxima, minima)
    }

    #[test]
    fn two_peaks_match_dense_search() {
        let curve = noiseless_fit(&two_peak_cell(), 300);
        let ex = find_extrema(&curve, CurveKind::Ic, 512).unwrap();
        let (maxima, minima) = dense_extrema(|v| curve.ic_at(v), curve.v_range.0, curve.v_range.1);
        assert_eq!(ex.peaks.len(), 2);
        assert_eq!(ex.valleys.len(), 1);
        assert_eq!(maxima.len(), 2);
        for (p, m) in ex.peaks.iter().zip(&maxima) {
            assert!((p.location - m).abs() < 2e-5, "{} vs {m}", p.location);
        }
        let interior: Vec<f64> = minima.into_iter().filter(|&m| m > maxima[0] && m < maxima[1]).collect();
        assert_eq!(interior.len(), 1);
        assert!((ex.valleys[0].location - interior[0]).abs() < 2e-5);
        assert!(ex.peaks[0].location < ex.valleys[0].location && ex.valleys[0].location < ex.peaks[1].location);
        assert!(ex.valleys[0].height < ex.peaks[0].height.min(ex.peaks[1].height));
    }

    #[test]
    fn peak_locations_match_true_curve() {
        let cell = two_peak_cell();
        let curve = noiseless_fit(&cell, 300);
        let ex = find_extrema(&curve, CurveKind::Ic, 512).unwrap();
        let (truth, _) = dense_extrema(|v| cell.incremental_capacity(v), 3.35, 4.10);
        assert_eq!(truth.len(), 2);
        for (p, t) in ex.peaks.iter().zip(&truth) {
            assert!((p.location - t).abs() < 1e-3, "{} vs {t}", p.location);
        }
    }

    #[test]
    fn peak_budget_keeps_most_prominent() {
        let curve = noiseless_fit(&two_peak_cell(), 300);
        let all = find_ic_extrema(&curve, 512, 0.05, None).unwrap();
        let one = find_ic_extrema(&curve, 512, 0.05, Some(1)).unwrap();
        assert_eq!(one.peaks.len(), 1);
        assert!(one.valleys.is_empty());
        let tallest = all.peaks.iter().max_by(|a, b| a.height.total_cmp(&b.height)).unwrap();
        assert_eq!(one.peaks[0], *tallest);
        assert_eq!(find_ic_extrema(&curve, 512, 0.05, Some(5)).unwrap(), all);
    }

    #[test]
    fn monotone_ic_has_no_extrema() {
        let v: Vec<f64> = (0..100).map(|i| 3.0 + 0.01 * i as f64).collect();
        let q: Vec<f64> = v.iter().map(|&x| (x - 3.0).powi(3)).collect();
        let curve = fit_samples(&v, &q, &FitConfig::default()).unwrap();
        let ex = find_extrema(&curve, CurveKind::Ic, 256).unwrap();
        assert!(ex.peaks.is_empty() && ex.valleys.is_empty());
    }

    #[test]
    fn small_grid_rejected() {
        let curve = noiseless_fit(&two_peak_cell(), 100);
        assert!(matches!(find_extrema(&curve, CurveKind::Ic, 63), Err(Error::Argument(_))));
    }

    #[test]
    fn dv_extrema_mirror_ic() {
        let curve = noiseless_fit(&two_peak_cell(), 300);
        let ic = find_extrema(&curve, CurveKind::Ic, 512).unwrap();
        let dv = find_extrema(&curve, CurveKind::Dv, 512).unwrap();
        assert_eq!(dv.valleys.len(), ic.peaks.len());
        assert_eq!(dv.peaks.len(), ic.valleys.len());
        for (p, d) in ic.peaks.iter().zip(&dv.valleys) {
            assert!((p.height * d.height - 1.0).abs() < 1e-9);
        }
        // The DV valley is a local minimum of DV as a function of capacity.
        let d = dv.valleys[0];
        let q0 = curve.q_range.0;
        let h = 0.05;
        let at = |q: f64| curve.eval_dv(&[q0 + q]).unwrap()[0];
        assert!(at(d.location - h) > d.height && at(d.location + h) > d.height);
    }

    #[test]
    fn peak_areas_telescope() {
        let curve = noiseless_fit(&two_peak_cell(), 300);
        let ic = find_extrema(&curve, CurveKind::Ic, 512).unwrap();
        let dv = find_extrema(&curve, CurveKind::Dv, 512).unwrap();
        let valleys: Vec<f64> = ic.valleys.iter().map(|e| e.location).collect();
        let areas = ic_peak_areas(&curve, &valleys).unwrap();
        assert_eq!(areas.len(), 2);
        let total = curve.q_range.1 - curve.q_range.0;
        assert!((areas.iter().sum::<f64>() - total).abs() < 1e-9 * total.abs().max(1.0));
        assert!((areas[0] - dv.peaks[0].location).abs() < 1e-9);
        let single = ic_peak_areas(&curve, &[]).unwrap();
        assert_eq!(single.len(), 1);
        assert!((single[0] - total).abs() < 1e-12 * total);
        assert!(ic_peak_areas(&curve, &[5.0]).is_err());
    }

    fn single_peak_cell() -> CellSpec {
        CellSpec {
            capacity: 40.0,
            peak_centers: vec![3.70],
            peak_widths: vec![0.03],
            peak_weights: vec![1.0],
            resistance: 0.0,
        }
    }

    #[test]
    fn window_area_is_symmetric_mass() {
        let cell = single_peak_cell();
        let curve = noiseless_fit(&cell, 400);
        let ic = find_extrema(&curve, CurveKind::Ic, 512).unwrap();
        assert_eq!(ic.peaks.len(), 1);
        let h = 0.03;
        let spec = PartialAreaSpec::window(h);
        let a = ic_partial_area(&curve, &spec, &ic.peaks).unwrap();
        // Logistic mass within ±h of the center.
        let s = |x: f64| 1.0 / (1.0 + (-x / 0.03f64).exp());
        let oracle = 2.0 * 40.0 * (s(h) - s(0.0));
        assert!((a.value - oracle).abs() < 1e-3 * 40.0, "{} vs {oracle}", a.value);
        let p = ic.peaks[0].location;
        let fitted = 2.0 * (curve.charge_at(p + h) - curve.charge_at(p));
        assert!((a.value - fitted).abs() < 1e-3 * 40.0);
    }

    #[test]
    fn cutoff_area() {
        let curve = noiseless_fit(&single_peak_cell(), 400);
        let ic = find_extrema(&curve, CurveKind::Ic, 512).unwrap();
        let zero = PartialAreaSpec {
            mode: PartialAreaMode::CutoffLine { cutoff: 0.0 },
            target_peak: Some(1),
        };
        let n = 200_000;
        let (v0, v1) = curve.v_range;
        let dv = (v1 - v0) / n as f64;
        // Midpoint sum over the run of grid cells around the peak where IC
        // stays above the cutoff.
        let p = ic.peaks[0].location;
        let riemann = |cut: f64| -> f64 {
            let mid = |i: usize| v0 + (i as f64 + 0.5) * dv;
            let above = |i: usize| curve.ic_at(mid(i)) > cut;
            let centre = ((p - v0) / dv) as usize;
            let mut lo = centre;
            while lo > 0 && above(lo - 1) {
                lo -= 1;
            }
            let mut hi = centre;
            while hi + 1 < n && above(hi + 1) {
                hi += 1;
            }
            (lo..=hi).map(|i| (curve.ic_at(mid(i)) - cut) * dv).sum()
        };
        // A zero cutoff takes the whole peak, which is the cell capacity up to
        // the fit error in the flat tails.
        let a = ic_partial_area(&curve, &zero, &ic.peaks).unwrap();
        assert!((a.value - riemann(0.0)).abs() < 1e-5, "{} vs {}", a.value, riemann(0.0));
        assert!((a.value - 40.0).abs() < 1e-3 * 40.0);

        let cut = 0.5 * ic.peaks[0].height;
        let half = PartialAreaSpec {
            mode: PartialAreaMode::CutoffLine { cutoff: cut },
            target_peak: None,
        };
        let a = ic_partial_area(&curve, &half, &ic.peaks).unwrap();
        assert!((a.value - riemann(cut)).abs() < 1e-5, "{} vs {}", a.value, riemann(cut));

        let above = PartialAreaSpec {
            mode: PartialAreaMode::CutoffLine {
                cutoff: ic.peaks[0].height + 1.0,
            },
            target_peak: None,
        };
        let a = ic_partial_area(&curve, &above, &ic.peaks).unwrap();
        assert_eq!(a.value, 0.0);
        assert!(a.below_cutoff);
        let missing = PartialAreaSpec {
            target_peak: Some(3),
            ..above
        };
        assert!(ic_partial_area(&curve, &missing, &ic.peaks).is_err());
    }

    #[test]
    fn feature_names_round_trip() {
        for kind in FeatureKind::ALL {
            let k = if kind.indexed() { 3 } else { 0 };
            assert_eq!(parse_feature_name(&feature_name(kind, k)), Some((kind, k)));
        }
        assert_eq!(parse_feature_name("IC_PH_0"), None);
        assert_eq!(parse_feature_name("IC_PH"), None);
        assert_eq!(parse_feature_name("TEMP_1"), None);
    }

    #[test]
    fn config_toml_round_trip() {
        let text = r#"
grid_size = 256
ic_areas = false

[[partial_areas]]
mode = "cutoff_line"
cutoff = 120.0
target_peak = 2

[[partial_areas]]
mode = "voltage_window"
half_width = 0.01
"#;
        let cfg = ExtractionConfig::from_toml(text).unwrap();
        assert_eq!(cfg.grid_size, 256);
        assert!(!cfg.ic_areas && cfg.ic_peaks);
        assert_eq!(cfg.partial_areas[0].mode, PartialAreaMode::CutoffLine { cutoff: 120.0 });
        assert_eq!(cfg.partial_areas[0].target_peak, Some(2));
        assert_eq!(cfg.partial_areas[1], PartialAreaSpec::window(0.01));
        let back = ExtractionConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExtractionConfig::from_toml("grid_size = 10").is_err());
        assert!(ExtractionConfig::from_toml("bogus = 1").is_err());
    }
}
