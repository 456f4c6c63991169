//! Smooth Q(V) fits with closed-form IC and DV curves.

use nalgebra::{DMatrix, DVector};

use crate::data::QvProfile;
use crate::error::{Error, Result};

pub const MAX_CENTERS: usize = 128;
pub const MONOTONE_GRID: usize = 512;
const CONDITION_LIMIT: f64 = 1e12;
const IC_SINGULAR: f64 = 1e-9;
/// Bandwidth candidates, in multiples of the median voltage spacing.
pub const BANDWIDTH_MULTIPLES: [f64; 9] = [2.0, 4.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0];
/// Inflation of the effective degrees of freedom in the GCV score. Voltage
/// noise on densely sampled plateaus is locally correlated, and plain GCV
/// (factor 1) then tends to pick bandwidths that follow the noise.
pub const GCV_DOF_FACTOR: f64 = 2.0;
/// Ridge candidates, in multiples of the sample count.
pub const RIDGE_MULTIPLES: [f64; 4] = [1e-6, 1e-4, 1e-2, 1.0];

/// Gaussian kernels with widths of at least `h_u` and at least the distance
/// to the farther neighboring center.
struct Basis {
    centers_u: Vec<f64>,
    widths_u: Vec<f64>,
    inv_w2: Vec<f64>,
}

impl Basis {
    fn new(centers_u: &[f64], h_u: f64) -> Self {
        let m = centers_u.len();
        let widths_u: Vec<f64> = (0..m)
            .map(|j| {
                let left = if j > 0 { centers_u[j] - centers_u[j - 1] } else { 0.0 };
                let right = if j + 1 < m { centers_u[j + 1] - centers_u[j] } else { 0.0 };
                h_u.max(left.max(right))
            })
            .collect();
        let inv_w2 = widths_u.iter().map(|w| 1.0 / (w * w)).collect();
        Self {
            centers_u: centers_u.to_vec(),
            widths_u,
            inv_w2,
        }
    }

    /// Columns: 1, u, then one kernel per center.
    fn design(&self, u: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(u.len(), self.centers_u.len() + 2, |i, j| match j {
            0 => 1.0,
            1 => u[i],
            _ => {
                let d = u[i] - self.centers_u[j - 2];
                (-0.5 * d * d * self.inv_w2[j - 2]).exp()
            }
        })
    }
}

struct Candidate {
    beta: DVector<f64>,
    rss: f64,
    /// Effective degrees of freedom, trace of the hat matrix.
    dof: f64,
    ridge: f64,
    h_u: f64,
    gram: DMatrix<f64>,
}

impl Candidate {
    fn solve(
        x: &DMatrix<f64>,
        gram: &DMatrix<f64>,
        xty: &DVector<f64>,
        y: &DVector<f64>,
        ridge: f64,
        h_u: f64,
    ) -> Option<Self> {
        let p = gram.ncols();
        let mut a = gram.clone();
        for j in 2..p {
            a[(j, j)] += ridge;
        }
        let chol = a.clone().cholesky()?;
        let beta = chol.solve(xty);
        let inv = chol.inverse();
        // tr((G + rD)^-1 G) = p - r * sum_{j >= 2} [(G + rD)^-1]_jj
        let dof = p as f64 - ridge * (2..p).map(|j| inv[(j, j)]).sum::<f64>();
        let rss = (y - x * &beta).norm_squared();
        Some(Self {
            beta,
            rss,
            dof,
            ridge,
            h_u,
            gram: a,
        })
    }

    /// `n * RSS / (n - factor * dof)^2`.
    fn gcv(&self, n: usize) -> f64 {
        let slack = n as f64 - GCV_DOF_FACTOR * self.dof;
        if slack <= 0.5 {
            return f64::INFINITY;
        }
        n as f64 * self.rss / (slack * slack)
    }
}

/// Fit hyperparameters. A `None` field is chosen by generalized
/// cross-validation over [`BANDWIDTH_MULTIPLES`] (of the median voltage
/// spacing) or [`RIDGE_MULTIPLES`] (of the sample count).
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Minimum Gaussian width in volts.
    pub bandwidth: Option<f64>,
    /// Ridge penalty on the kernel weights.
    pub ridge: Option<f64>,
}

/// Fitted charge curve `Q(V) = a + b u + sum_j w_j exp(-(u - c_j)^2 / (2 h_j^2))`
/// in the normalized voltage `u = (V - v_min) / (v_max - v_min)`, with Q in
/// units of the profile's capacity span.
#[derive(Debug, Clone, PartialEq)]
pub struct IcDvCurve {
    /// Kernel centers in volts.
    pub basis_centers: Vec<f64>,
    /// Per-center widths in volts (at least `bandwidth`).
    pub basis_widths: Vec<f64>,
    pub basis_weights: Vec<f64>,
    /// Affine trend `(a, b)` in normalized units.
    pub trend: (f64, f64),
    pub bandwidth: f64,
    pub ridge: f64,
    pub v_range: (f64, f64),
    /// Fitted charge at the ends of `v_range`.
    pub q_range: (f64, f64),
    pub residual_rms: f64,
    pub noise_estimate: f64,
    pub condition: f64,
    /// False when the fitted Q decreases somewhere on the check grid.
    pub monotone: bool,
    // Normalization used internally.
    q_offset: f64,
    q_scale: f64,
    centers_u: Vec<f64>,
    inv_w2: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Noise level of capacity readings from the residuals of three-point linear
/// interpolation, each scaled by its variance factor `1 + a^2 + b^2`.
pub fn estimate_noise(v: &[f64], q: &[f64]) -> f64 {
    if v.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 1..v.len() - 1 {
        let b = (v[i] - v[i - 1]) / (v[i + 1] - v[i - 1]);
        let a = 1.0 - b;
        let r = q[i] - (a * q[i - 1] + b * q[i + 1]);
        acc += r * r / (1.0 + a * a + b * b);
    }
    (acc / (v.len() - 2) as f64).sqrt()
}

/// Indices of at most `max` data points whose voltages are nearest to a
/// uniform voltage grid, deduplicated and sorted.
fn pick_centers(v: &[f64], max: usize) -> Vec<usize> {
    if v.len() <= max {
        return (0..v.len()).collect();
    }
    let (lo, hi) = (v[0], v[v.len() - 1]);
    let mut out: Vec<usize> = (0..max)
        .map(|k| {
            let target = lo + (hi - lo) * k as f64 / (max - 1) as f64;
            let i = v.partition_point(|&x| x < target).min(v.len() - 1);
            if i > 0 && (target - v[i - 1]) <= (v[i] - target) {
                i - 1
            } else {
                i
            }
        })
        .collect();
    out.dedup();
    out
}

pub fn fit_qv(profile: &QvProfile, config: &FitConfig) -> Result<IcDvCurve> {
    fit_samples(profile.voltage(), profile.capacity(), config)
}

/// Fits raw `(V, Q)` samples; `v` must be strictly increasing.
pub fn fit_samples(v: &[f64], q: &[f64], config: &FitConfig) -> Result<IcDvCurve> {
    let n = v.len();
    if n < 4 || q.len() != n {
        return Err(Error::Fit(format!("need at least 4 paired samples, got {n}")));
    }
    if v.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Fit("voltage samples must be strictly increasing".into()));
    }
    let (v_min, v_max) = (v[0], v[n - 1]);
    let span = v_max - v_min;
    if let Some(b) = config.bandwidth {
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::Argument(format!("bandwidth must be positive, got {b}")));
        }
    }
    if let Some(r) = config.ridge {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Argument(format!("ridge must be positive, got {r}")));
        }
    }
    let q_min = q.iter().copied().fold(f64::INFINITY, f64::min);
    let q_max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let q_scale = if q_max > q_min { q_max - q_min } else { 1.0 };
    let u: Vec<f64> = v.iter().map(|x| (x - v_min) / span).collect();
    let y: Vec<f64> = q.iter().map(|x| (x - q_min) / q_scale).collect();

    let idx = pick_centers(v, MAX_CENTERS);
    let centers_u: Vec<f64> = idx.iter().map(|&i| u[i]).collect();
    let median_u = median(u.windows(2).map(|w| w[1] - w[0]).collect());
    let yv = DVector::from_column_slice(&y);

    let bandwidths: Vec<f64> = match config.bandwidth {
        Some(b) => vec![b / span],
        None => BANDWIDTH_MULTIPLES.iter().map(|m| m * median_u).collect(),
    };
    let ridges: Vec<f64> = match config.ridge {
        Some(r) => vec![r],
        None => RIDGE_MULTIPLES.iter().map(|m| m * n as f64).collect(),
    };
    let mut best: Option<(f64, Candidate)> = None;
    for &h_u in &bandwidths {
        let basis = Basis::new(&centers_u, h_u);
        let x = basis.design(&u);
        let gram = x.tr_mul(&x);
        let xty = x.tr_mul(&yv);
        for &ridge in &ridges {
            let Some(cand) = Candidate::solve(&x, &gram, &xty, &yv, ridge, h_u) else {
                continue;
            };
            let score = cand.gcv(n);
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, cand));
            }
        }
    }
    let (_, chosen) = best.ok_or_else(|| {
        Error::Fit("normal equations not positive definite for any candidate; use a larger ridge".into())
    })?;
    let Candidate {
        beta,
        ridge,
        h_u,
        gram,
        ..
    } = chosen;
    let bandwidth = h_u * span;
    let eig = gram.symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &e| (a.min(e), b.max(e.abs())));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if condition > CONDITION_LIMIT {
        return Err(Error::Fit(format!(
            "normal equations ill-conditioned (condition {condition:.3e}); use a larger ridge than {ridge:e}"
        )));
    }
    let Basis { widths_u, inv_w2, .. } = Basis::new(&centers_u, h_u);

    let mut curve = IcDvCurve {
        basis_centers: centers_u.iter().map(|c| v_min + c * span).collect(),
        basis_widths: widths_u.iter().map(|w| w * span).collect(),
        basis_weights: beta.iter().skip(2).copied().collect(),
        trend: (beta[0], beta[1]),
        bandwidth,
        ridge,
        v_range: (v_min, v_max),
        q_range: (0.0, 0.0),
        residual_rms: 0.0,
        noise_estimate: estimate_noise(v, q),
        condition,
        monotone: true,
        q_offset: q_min,
        q_scale,
        centers_u,
        inv_w2,
    };
    curve.q_range = (curve.charge_at(v_min), curve.charge_at(v_max));
    let ss: f64 = v.iter().zip(q).map(|(&vi, &qi)| (curve.charge_at(vi) - qi).powi(2)).sum();
    curve.residual_rms = (ss / n as f64).sqrt();
    let grid = curve.grid(MONOTONE_GRID);
    curve.monotone = grid
        .windows(2)
        .all(|w| curve.charge_at(w[1]) >= curve.charge_at(w[0]) - 1e-12 * q_scale);
    if !curve.monotone {
        log::warn!("fitted charge curve is not monotone on the check grid");
    }
    Ok(curve)
}

impl IcDvCurve {
    fn u(&self, v: f64) -> f64 {
        (v - self.v_range.0) / (self.v_range.1 - self.v_range.0)
    }

    /// Normalized value and derivative with respect to `u`.
    fn eval_u(&self, u: f64) -> (f64, f64) {
        let (mut f, mut df) = (self.trend.0 + self.trend.1 * u, self.trend.1);
        for ((c, w), iw2) in self.centers_u.iter().zip(&self.basis_weights).zip(&self.inv_w2) {
            let d = u - c;
            let k = w * (-0.5 * d * d * iw2).exp();
            f += k;
            df -= k * d * iw2;
        }
        (f, df)
    }

    /// Fitted charge at `v`, without range checking.
    pub fn charge_at(&self, v: f64) -> f64 {
        self.q_offset + self.q_scale * self.eval_u(self.u(v)).0
    }

    /// Analytic dQ/dV at `v`, without range checking.
    pub fn ic_at(&self, v: f64) -> f64 {
        self.q_scale / (self.v_range.1 - self.v_range.0) * self.eval_u(self.u(v)).1
    }

    fn check_v(&self, v: f64) -> Result<()> {
        let slack = 1e-12 * (self.v_range.1 - self.v_range.0);
        if !(v >= self.v_range.0 - slack && v <= self.v_range.1 + slack) {
            return Err(Error::Range {
                value: v,
                min: self.v_range.0,
                max: self.v_range.1,
            });
        }
        Ok(())
    }

    pub fn eval_q(&self, v_grid: &[f64]) -> Result<Vec<f64>> {
        v_grid
            .iter()
            .map(|&v| self.check_v(v).map(|_| self.charge_at(v)))
            .collect()
    }

    pub fn eval_ic(&self, v_grid: &[f64]) -> Result<Vec<f64>> {
        v_grid.iter().map(|&v| self.check_v(v).map(|_| self.ic_at(v))).collect()
    }

    /// Voltage where the fitted charge equals `q`, by bisection over the
    /// voltage range.
    pub fn voltage_at(&self, q: f64) -> Result<f64> {
        let (q0, q1) = (self.q_range.0.min(self.q_range.1), self.q_range.0.max(self.q_range.1));
        let slack = 1e-12 * (q1 - q0).max(1e-300);
        if !(q >= q0 - slack && q <= q1 + slack) {
            return Err(Error::Range {
                value: q,
                min: q0,
                max: q1,
            });
        }
        let (mut lo, mut hi) = self.v_range;
        let increasing = self.q_range.1 >= self.q_range.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if (self.charge_at(mid) < q) == increasing {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// DV = dV/dQ at each capacity, as `1 / IC` at the inverted voltage.
    pub fn eval_dv(&self, q_grid: &[f64]) -> Result<Vec<f64>> {
        q_grid
            .iter()
            .map(|&q| {
                let v = self.voltage_at(q)?;
                self.dv_at_voltage(v).map_err(|_| Error::DerivativeSingularity { capacity: q })
            })
            .collect()
    }

    /// DV at the point of the curve with voltage `v`.
    pub fn dv_at_voltage(&self, v: f64) -> Result<f64> {
        let ic = self.ic_at(v);
        if ic.abs() < IC_SINGULAR {
            return Err(Error::DerivativeSingularity {
                capacity: self.charge_at(v),
            });
        }
        Ok(1.0 / ic)
    }

    /// `n` evenly spaced voltages covering the fitted range.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        let (a, b) = self.v_range;
        (0..n)
            .map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 })
            .collect()
    }
}

/// One row of a curve dump.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CurveSample {
    pub v: f64,
    pub qc_fit: f64,
    pub ic: f64,
    /// Empty where IC is too small to invert.
    pub dv: Option<f64>,
}

/// Samples `(v, qc_fit, ic, dv)` on an evenly spaced grid of `n` voltages.
pub fn sample_curve(curve: &IcDvCurve, n: usize) -> Vec<CurveSample> {
    curve
        .grid(n)
        .into_iter()
        .map(|v| CurveSample {
            v,
            qc_fit: curve.charge_at(v),
            ic: curve.ic_at(v),
            dv: curve.dv_at_voltage(v).ok(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_module_profile, CellSpec, ChargeProtocol};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cell() -> CellSpec {
        CellSpec {
            capacity: 2.0,
            peak_centers: vec![3.7],
            peak_widths: vec![0.05],
            peak_weights: vec![1.0],
            resistance: 0.0,
        }
    }

    fn profile(cell: &CellSpec, n: usize, noise: f64, seed: u64) -> QvProfile {
        let protocol = ChargeProtocol {
            current: 0.0,
            v_start: 3.4,
            v_end: 4.0,
            n_samples: n,
            noise_sigma_v: noise,
            temperature_c: 25.0,
        };
        synth_module_profile(std::slice::from_ref(cell), &protocol, seed, "c", 0, Some(1.0)).unwrap()
    }

    fn peak_location(curve: &IcDvCurve) -> f64 {
        let g = curve.grid(60_001);
        *g.iter().max_by(|a, b| curve.ic_at(**a).total_cmp(&curve.ic_at(**b))).unwrap()
    }

    #[test]
    fn noiseless_sigmoid_is_reproduced() {
        let c = cell();
        let v: Vec<f64> = (0..64).map(|i| 3.4 + 0.6 * i as f64 / 63.0).collect();
        let q: Vec<f64> = v.iter().map(|&x| c.charge(x)).collect();
        let curve = fit_samples(&v, &q, &FitConfig::default()).unwrap();
        let worst = curve
            .grid(5000)
            .iter()
            .map(|&v| (curve.charge_at(v) - c.charge(v)).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-3 * c.capacity, "max error {worst}");
        assert!(curve.residual_rms <= 3.0 * curve.noise_estimate);
        assert!(curve.monotone);
    }

    #[test]
    fn linear_profile_has_constant_ic() {
        let v: Vec<f64> = (0..50).map(|i| 3.0 + 0.02 * i as f64).collect();
        let q: Vec<f64> = v.iter().map(|x| 1.5 * x - 2.0).collect();
        let curve = fit_samples(&v, &q, &FitConfig::default()).unwrap();
        for x in curve.grid(200) {
            assert!((curve.ic_at(x) - 1.5).abs() <= 1e-6 * 1.5, "IC {} at {x}", curve.ic_at(x));
        }
    }

    #[test]
    fn noise_moves_the_peak_little() {
        let c = cell();
        let clean = fit_qv(&profile(&c, 200, 0.0, 0), &FitConfig::default()).unwrap();
        let noisy = fit_qv(&profile(&c, 200, 1e-3, 5), &FitConfig::default()).unwrap();
        let (a, b) = (peak_location(&clean), peak_location(&noisy));
        assert!((a - 3.7).abs() <= 1e-3, "clean peak at {a}");
        assert!((a - b).abs() <= 5e-3, "{a} vs {b}");
    }

    #[test]
    fn reciprocal_identity_holds() {
        let curve = fit_qv(&profile(&cell(), 120, 0.0, 0), &FitConfig::default()).unwrap();
        for v in [3.55, 3.65, 3.7, 3.82] {
            let ic = curve.eval_ic(&[v]).unwrap()[0];
            let dv = curve.eval_dv(&[curve.charge_at(v)]).unwrap()[0];
            assert!((ic * dv - 1.0).abs() <= 1e-9, "at {v}: {}", ic * dv);
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let curve = fit_qv(&profile(&CellSpec::default(), 200, 1e-3, 3), &FitConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = curve.v_range;
        let scale = curve.grid(512).iter().map(|&v| curve.ic_at(v).abs()).fold(0.0, f64::max);
        let h = 1e-5;
        for _ in 0..100 {
            let v = a + h + (b - a - 2.0 * h) * rng.random::<f64>();
            let fd = (curve.charge_at(v + h) - curve.charge_at(v - h)) / (2.0 * h);
            let ic = curve.ic_at(v);
            assert!((fd - ic).abs() <= 1e-4 * ic.abs().max(1e-3 * scale), "at {v}: {fd} vs {ic}");
        }
    }

    #[test]
    fn out_of_range_requests_fail() {
        let curve = fit_qv(&profile(&cell(), 64, 0.0, 0), &FitConfig::default()).unwrap();
        assert!(matches!(curve.eval_ic(&[3.0]), Err(Error::Range { .. })));
        assert!(matches!(curve.eval_dv(&[1e6]), Err(Error::Range { .. })));
    }

    #[test]
    fn fitting_is_deterministic() {
        let p = profile(&CellSpec::default(), 200, 1e-3, 1);
        assert_eq!(fit_qv(&p, &FitConfig::default()).unwrap(), fit_qv(&p, &FitConfig::default()).unwrap());
    }

    #[test]
    fn bad_hyperparameters_are_rejected() {
        let p = profile(&cell(), 64, 0.0, 0);
        let cfg = FitConfig {
            ridge: Some(0.0),
            ..FitConfig::default()
        };
        assert!(fit_qv(&p, &cfg).is_err());
    }
}
