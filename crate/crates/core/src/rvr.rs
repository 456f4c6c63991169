//! Relevance vector regression with an RBF kernel.
//!
//! Inputs and labels are z-scored inside [`train`]; the model keeps the
//! scaling and returns predictions in the original label units.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{mean, sample_std};
use crate::error::{Error, Result};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RvrConfig {
    /// Kernel parameter in `exp(-rho * |x - x'|^2)` on standardized inputs;
    /// `None` uses [`median_heuristic_rho`].
    pub rho: Option<f64>,
    pub n_iter_max: usize,
    pub alpha_threshold: f64,
    pub tolerance: f64,
    pub epsilon: f64,
    pub include_offset: bool,
}

impl Default for RvrConfig {
    fn default() -> Self {
        Self {
            rho: None,
            n_iter_max: 3000,
            alpha_threshold: 1e9,
            tolerance: 1e-3,
            epsilon: 1e-8,
            include_offset: true,
        }
    }
}

impl RvrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if let Some(r) = self.rho {
            if !(r > 0.0 && r.is_finite()) {
                return bad(format!("rho must be positive, got {r}"));
            }
        }
        if self.n_iter_max == 0 {
            return bad("n_iter_max must be at least 1".into());
        }
        if !(self.alpha_threshold > 1.0) {
            return bad(format!("alpha_threshold must exceed 1, got {}", self.alpha_threshold));
        }
        if !(self.tolerance > 0.0) || !(self.epsilon > 0.0) {
            return bad("tolerance and epsilon must be positive".into());
        }
        Ok(())
    }
}

pub fn rbf_kernel(x: &[f64], y: &[f64], rho: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    Ok((-rho * sq_dist(x, y)).exp())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Design matrix against `centers`: an optional leading column of ones, then
/// one kernel column per center.
pub fn design_against(inputs: &[Vec<f64>], centers: &[Vec<f64>], rho: f64, include_offset: bool) -> DMatrix<f64> {
    let o = usize::from(include_offset);
    DMatrix::from_fn(inputs.len(), centers.len() + o, |i, j| {
        if j < o {
            1.0
        } else {
            (-rho * sq_dist(&inputs[i], &centers[j - o])).exp()
        }
    })
}

/// `N x (N + 1)` design (or `N x N` without offset) with a kernel centered
/// at every input.
pub fn build_design(inputs: &[Vec<f64>], rho: f64, include_offset: bool) -> DMatrix<f64> {
    design_against(inputs, inputs, rho, include_offset)
}

/// `rho = 1 / (2 d m^2)` with `m` the median pairwise Euclidean distance.
pub fn median_heuristic_rho(inputs: &[Vec<f64>]) -> Result<f64> {
    let n = inputs.len();
    let d = inputs.first().map_or(0, Vec::len);
    let mut dists = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(&inputs[i], &inputs[j]).sqrt());
        }
    }
    if dists.is_empty() || d == 0 {
        return Err(Error::Argument("median heuristic needs at least two inputs".into()));
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let med = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if !(med > 0.0) {
        return Err(Error::Argument("all training inputs coincide".into()));
    }
    Ok(1.0 / (2.0 * d as f64 * med * med))
}

fn alpha_spectrum(alpha: &[f64]) -> String {
    let lo = alpha.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = alpha.iter().copied().fold(0.0, f64::max);
    format!("{} weights, alpha in [{lo:.3e}, {hi:.3e}]", alpha.len())
}

/// `Sigma = (beta Phi'Phi + A)^-1` and `mu = beta Sigma Phi'y` from the
/// precomputed `Phi'Phi` and `Phi'y`.
fn posterior_from_gram(
    gram: &DMatrix<f64>,
    phi_y: &DVector<f64>,
    alpha: &[f64],
    beta: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if alpha.iter().any(|a| !(*a > 0.0)) || !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Conditioning(format!(
            "non-positive precision ({}, beta {beta:.3e})",
            alpha_spectrum(alpha)
        )));
    }
    let mut h = gram * beta;
    for (i, a) in alpha.iter().enumerate() {
        h[(i, i)] += a;
    }
    let chol = h
        .cholesky()
        .ok_or_else(|| Error::Conditioning(format!("Cholesky failed ({})", alpha_spectrum(alpha))))?;
    let mu = chol.solve(phi_y) * beta;
    let sigma = chol.inverse();
    Ok((sigma, mu))
}

pub fn posterior_update(
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha: &[f64],
    beta: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if alpha.len() != phi.ncols() || y.len() != phi.nrows() {
        return Err(Error::DimensionMismatch {
            expected: phi.ncols(),
            found: alpha.len(),
        });
    }
    posterior_from_gram(&phi.tr_mul(phi), &phi.tr_mul(y), alpha, beta)
}

/// `max |Sigma (beta Phi'Phi + A) - I|`.
pub fn identity_residual(sigma: &DMatrix<f64>, phi: &DMatrix<f64>, alpha: &[f64], beta: f64) -> f64 {
    let mut h = phi.tr_mul(phi) * beta;
    for (i, a) in alpha.iter().enumerate() {
        h[(i, i)] += a;
    }
    let mut r = sigma * h;
    for i in 0..r.nrows() {
        r[(i, i)] -= 1.0;
    }
    r.amax()
}

/// Fixed-point updates `alpha_i = max(gamma_i, eps) / mu_i^2` with
/// `gamma_i = 1 - alpha_i Sigma_ii`, and
/// `1 / beta = |y - Phi mu|^2 / (N - sum gamma)`.
pub fn hyper_update(
    sigma: &DMatrix<f64>,
    mu: &DVector<f64>,
    alpha_old: &[f64],
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    epsilon: f64,
) -> Result<(Vec<f64>, f64)> {
    let residual = (y - phi * mu).norm_squared();
    hyper_from_residual(sigma, mu, alpha_old, residual, y.len(), epsilon)
}

fn hyper_from_residual(
    sigma: &DMatrix<f64>,
    mu: &DVector<f64>,
    alpha_old: &[f64],
    residual: f64,
    n: usize,
    epsilon: f64,
) -> Result<(Vec<f64>, f64)> {
    let gamma: Vec<f64> = alpha_old
        .iter()
        .enumerate()
        .map(|(i, a)| 1.0 - a * sigma[(i, i)])
        .collect();
    let alpha = gamma
        .iter()
        .zip(mu.iter())
        .map(|(g, m)| g.max(epsilon) / (m * m))
        .collect();
    let dof = n as f64 - gamma.iter().sum::<f64>();
    if !(dof > 0.0) {
        return Err(Error::DegenerateNoise(format!(
            "N - sum(gamma) = {dof:.3e} is not positive"
        )));
    }
    let noise_var = residual / dof;
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::DegenerateNoise(format!("noise variance {noise_var:.3e}")));
    }
    Ok((alpha, 1.0 / noise_var))
}

/// `log p(y | alpha, beta)` for the current basis, from the posterior.
fn log_evidence(
    sigma: &DMatrix<f64>,
    mu: &DVector<f64>,
    alpha: &[f64],
    beta: f64,
    residual: f64,
    n: usize,
) -> f64 {
    // log|C| = -N log beta - sum log alpha - log|Sigma|
    let log_det_sigma = match sigma.clone().cholesky() {
        Some(c) => 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => return f64::NAN,
    };
    let log_det_c = -(n as f64) * beta.ln() - alpha.iter().map(|a| a.ln()).sum::<f64>() - log_det_sigma;
    let quad = beta * residual + mu.iter().zip(alpha).map(|(m, a)| a * m * m).sum::<f64>();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_c + quad)
}

/// A trained model. When `offset_used`, the first entries of `alpha` and `mu`
/// and the first row and column of `sigma` belong to the constant basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvrModel {
    pub version: u32,
    pub rho: f64,
    pub beta: f64,
    pub offset_used: bool,
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    /// Relevance vectors in input units.
    pub rv: Vec<Vec<f64>>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
    pub converged: bool,
    pub feature_names: Vec<String>,
}

/// What happened during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Starting precision shared by every weight.
    pub initial_alpha: f64,
    /// Starting noise precision (standardized labels).
    pub initial_beta: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log evidence (standardized labels) at each iteration.
    pub log_evidence: Vec<f64>,
    /// Basis functions kept after each iteration, the offset included.
    pub active: Vec<usize>,
    /// Identity residual of the final posterior.
    pub identity_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SohEstimate {
    pub mean: f64,
    pub sigma: f64,
    pub interval: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub avg_three_sigma: f64,
    pub coverage_997: f64,
    pub n: usize,
}

/// Median-heuristic kernel parameter for physical-unit inputs, computed on
/// the standardized inputs exactly as [`train`] does.
pub fn heuristic_rho(inputs: &[Vec<f64>]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Argument("median heuristic needs at least two inputs".into()));
    }
    let (m, s) = column_scales(inputs, &[])?;
    let z: Vec<Vec<f64>> = inputs
        .iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| (v - m[j]) / s[j]).collect())
        .collect();
    median_heuristic_rho(&z)
}

fn column_scales(inputs: &[Vec<f64>], names: &[String]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = inputs[0].len();
    let mut means = Vec::with_capacity(d);
    let mut stds = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = inputs.iter().map(|r| r[j]).collect();
        let s = sample_std(&col);
        if !(s > 0.0) {
            return Err(Error::ConstantColumn(names.get(j).cloned().unwrap_or_else(|| format!("x{j}"))));
        }
        means.push(mean(&col));
        stds.push(s);
    }
    Ok((means, stds))
}

fn check_inputs(inputs: &[Vec<f64>], d: usize) -> Result<()> {
    for row in inputs {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite input".into()));
        }
    }
    Ok(())
}

/// Trains on physical-unit inputs and labels.
pub fn train(
    inputs: &[Vec<f64>],
    labels: &[f64],
    feature_names: &[String],
    config: &RvrConfig,
) -> Result<(RvrModel, TrainReport)> {
    config.validate()?;
    let n = inputs.len();
    if n < 4 {
        return Err(Error::Argument(format!("need at least 4 training samples, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    let d = inputs[0].len();
    if d == 0 {
        return Err(Error::Argument("inputs have no features".into()));
    }
    if !feature_names.is_empty() && feature_names.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: feature_names.len(),
        });
    }
    check_inputs(inputs, d)?;
    if labels.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite label".into()));
    }
    let (x_mean, x_std) = column_scales(inputs, feature_names)?;
    let y_mean = mean(labels);
    let y_std = sample_std(labels);
    if !(y_std > 0.0) {
        return Err(Error::ConstantColumn("label".into()));
    }
    let z: Vec<Vec<f64>> = inputs
        .iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| (v - x_mean[j]) / x_std[j]).collect())
        .collect();
    let y = DVector::from_iterator(n, labels.iter().map(|v| (v - y_mean) / y_std));
    let rho = match config.rho {
        Some(r) => r,
        None => median_heuristic_rho(&z)?,
    };

    let phi = build_design(&z, rho, config.include_offset);
    let gram_full = phi.tr_mul(&phi);
    let phi_y_full = phi.tr_mul(&y);
    let m = phi.ncols();
    let mut active: Vec<usize> = (0..m).collect();
    let mut alpha = vec![1.0 / ((n + 1) as f64).powi(2); m];
    // 1 / (0.1 std(y))^2 with standardized labels.
    let mut beta = 100.0;
    let mut report = TrainReport {
        initial_alpha: alpha[0],
        initial_beta: beta,
        iterations: 0,
        converged: false,
        log_evidence: Vec::new(),
        active: Vec::new(),
        identity_residual: f64::NAN,
    };

    for iter in 1..=config.n_iter_max {
        let gram = gram_full.select_rows(&active).select_columns(&active);
        let phi_y = phi_y_full.select_rows(&active);
        let (sigma, mu) = posterior_from_gram(&gram, &phi_y, &alpha, beta)?;
        let phi_a = phi.select_columns(&active);
        let residual = (&y - &phi_a * &mu).norm_squared();
        report.log_evidence.push(log_evidence(&sigma, &mu, &alpha, beta, residual, n));
        let (new_alpha, new_beta) = hyper_from_residual(&sigma, &mu, &alpha, residual, n, config.epsilon)?;
        let change = new_alpha
            .iter()
            .zip(&alpha)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let keep: Vec<usize> = (0..active.len())
            .filter(|&i| new_alpha[i] < config.alpha_threshold)
            .collect();
        if keep.is_empty() {
            return Err(Error::EmptyModel);
        }
        active = keep.iter().map(|&i| active[i]).collect();
        alpha = keep.iter().map(|&i| new_alpha[i]).collect();
        beta = new_beta;
        report.iterations = iter;
        report.active.push(active.len());
        if iter > 1 && change <= config.tolerance {
            report.converged = true;
            break;
        }
    }
    if !report.converged {
        log::warn!(
            "RVR did not converge in {} iterations ({} basis functions left)",
            config.n_iter_max,
            active.len()
        );
    }
    for w in report.log_evidence.windows(2) {
        if w[1] < w[0] - 1e-6 {
            log::debug!("log evidence decreased from {} to {}", w[0], w[1]);
        }
    }

    let gram = gram_full.select_rows(&active).select_columns(&active);
    let phi_y = phi_y_full.select_rows(&active);
    let (sigma, mu) = posterior_from_gram(&gram, &phi_y, &alpha, beta)?;
    report.identity_residual = identity_residual(&sigma, &phi.select_columns(&active), &alpha, beta);

    let offset_used = config.include_offset && active.first() == Some(&0);
    let o = usize::from(config.include_offset);
    let rv = active
        .iter()
        .filter(|&&j| j >= o)
        .map(|&j| inputs[j - o].clone())
        .collect();
    let model = RvrModel {
        version: MODEL_VERSION,
        rho,
        beta,
        offset_used,
        alpha,
        mu: mu.iter().copied().collect(),
        sigma: (0..sigma.nrows()).map(|i| sigma.row(i).iter().copied().collect()).collect(),
        rv,
        x_mean,
        x_std,
        y_mean,
        y_std,
        converged: report.converged,
        feature_names: feature_names.to_vec(),
    };
    Ok((model, report))
}

impl RvrModel {
    pub fn n_relevance_vectors(&self) -> usize {
        self.rv.len()
    }

    pub fn dim(&self) -> usize {
        self.x_mean.len()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Basis vector at `x` in the model's weight order.
    fn basis(&self, x: &[f64]) -> Vec<f64> {
        let z = self.standardize(x);
        let mut phi = Vec::with_capacity(self.mu.len());
        if self.offset_used {
            phi.push(1.0);
        }
        for r in &self.rv {
            phi.push((-self.rho * sq_dist(&z, &self.standardize(r))).exp());
        }
        phi
    }

    pub fn predict(&self, x: &[f64]) -> Result<SohEstimate> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let phi = self.basis(x);
        let t: f64 = phi.iter().zip(&self.mu).map(|(p, m)| p * m).sum();
        let quad: f64 = (0..phi.len())
            .map(|i| phi[i] * (0..phi.len()).map(|j| self.sigma[i][j] * phi[j]).sum::<f64>())
            .sum();
        let var = 1.0 / self.beta + quad.max(0.0);
        let mean = self.y_mean + self.y_std * t;
        let sigma = self.y_std * var.sqrt();
        Ok(SohEstimate {
            mean,
            sigma,
            interval: (mean - 3.0 * sigma, mean + 3.0 * sigma),
        })
    }

    pub fn predict_all(&self, inputs: &[Vec<f64>]) -> Result<Vec<SohEstimate>> {
        inputs.iter().map(|x| self.predict(x)).collect()
    }

    /// Noise standard deviation in label units.
    pub fn noise_sigma(&self) -> f64 {
        self.y_std / self.beta.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ModelFormat(m));
        if self.version != MODEL_VERSION {
            return bad(format!("unsupported model version {}", self.version));
        }
        let p = self.rv.len() + usize::from(self.offset_used);
        if self.alpha.len() != p || self.mu.len() != p || self.sigma.len() != p {
            return bad(format!(
                "expected {p} weights, found alpha {}, mu {}, sigma {}",
                self.alpha.len(),
                self.mu.len(),
                self.sigma.len()
            ));
        }
        if self.sigma.iter().any(|r| r.len() != p) {
            return bad("sigma is not square".into());
        }
        let d = self.x_mean.len();
        if self.x_std.len() != d || self.rv.iter().any(|r| r.len() != d) {
            return bad("input dimensions disagree".into());
        }
        if !self.feature_names.is_empty() && self.feature_names.len() != d {
            return bad("feature_names length differs from input dimension".into());
        }
        if !(self.rho > 0.0 && self.beta > 0.0 && self.y_std > 0.0) || self.x_std.iter().any(|s| !(*s > 0.0)) {
            return bad("rho, beta and scales must be positive".into());
        }
        if p == 0 {
            return bad("model has no weights".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ModelFormat(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let model: Self = toml::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::ModelFormat(m) => Error::ModelFormat(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn metrics(estimates: &[SohEstimate], labels: &[f64]) -> Result<Metrics> {
    if estimates.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: estimates.len(),
        });
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyOutput("no labeled samples to evaluate".into()));
    }
    let nf = n as f64;
    let rmse = (estimates.iter().zip(labels).map(|(e, y)| (e.mean - y).powi(2)).sum::<f64>() / nf).sqrt();
    let avg_three_sigma = estimates.iter().map(|e| 3.0 * e.sigma).sum::<f64>() / nf;
    let inside = estimates
        .iter()
        .zip(labels)
        .filter(|(e, y)| **y >= e.interval.0 && **y <= e.interval.1)
        .count();
    Ok(Metrics {
        rmse,
        avg_three_sigma,
        coverage_997: inside as f64 / nf,
        n,
    })
}

pub fn evaluate(model: &RvrModel, inputs: &[Vec<f64>], labels: &[f64]) -> Result<Metrics> {
    metrics(&model.predict_all(inputs)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Uniform};

    #[test]
    fn kernel_values() {
        assert_eq!(rbf_kernel(&[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap(), 1.0);
        let k = rbf_kernel(&[0.0], &[1.0], 1.0).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-15);
        assert!((rbf_kernel(&[0.0], &[50.0], 1e-12).unwrap() - 1.0).abs() < 1e-8);
        assert!(rbf_kernel(&[0.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn design_shape_and_symmetry() {
        let x = vec![vec![0.0], vec![0.5], vec![2.0]];
        let phi = build_design(&x, 0.7, true);
        assert_eq!(phi.shape(), (3, 4));
        for i in 0..3 {
            assert_eq!(phi[(i, 0)], 1.0);
            assert_eq!(phi[(i, i + 1)], 1.0);
            for j in 0..3 {
                assert_eq!(phi[(i, j + 1)], phi[(j, i + 1)]);
            }
        }
        assert_eq!(build_design(&x, 0.7, false).shape(), (3, 3));
    }

    #[test]
    fn scalar_posterior() {
        let phi = DMatrix::from_element(1, 1, 1.0);
        let y = DVector::from_element(1, 2.0);
        let (s, m) = posterior_update(&phi, &y, &[1.0], 1.0).unwrap();
        assert!((s[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((m[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dominant_prior_zeroes_weight() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 0.3, 1.0, 0.5, 0.4]);
        let y = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let (_, m) = posterior_update(&phi, &y, &[1.0, 1e12], 1.0).unwrap();
        assert!(m[1].abs() < 1e-10);
    }

    #[test]
    fn posterior_identity_on_random_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let phi = DMatrix::from_fn(30, 8, |_, _| u.sample(&mut rng));
        let y = DVector::from_fn(30, |_, _| u.sample(&mut rng));
        let alpha: Vec<f64> = (0..8).map(|i| 0.5 + i as f64).collect();
        let (s, _) = posterior_update(&phi, &y, &alpha, 2.0).unwrap();
        assert!(identity_residual(&s, &phi, &alpha, 2.0) <= 1e-8);
    }

    #[test]
    fn hyper_update_formulas() {
        // gamma = 1 - alpha * Sigma = 1 when Sigma = 0; mu = 2 gives 0.25.
        let sigma = DMatrix::from_element(1, 1, 0.0);
        let mu = DVector::from_element(1, 2.0);
        let phi = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
        let y = DVector::from_row_slice(&[2.0, 2.5, 1.5]);
        let (a, b) = hyper_update(&sigma, &mu, &[1.0], &phi, &y, 1e-8).unwrap();
        assert_eq!(a, vec![0.25]);
        assert!((1.0 / b - 0.5 / 2.0).abs() < 1e-15);

        // Slightly negative gamma is clamped at epsilon.
        let sigma = DMatrix::from_element(1, 1, 1.001);
        let mu = DVector::from_element(1, 1.0);
        let (a, _) = hyper_update(&sigma, &mu, &[1.0], &phi, &y, 1e-8).unwrap();
        assert_eq!(a, vec![1e-8]);

        // Zero residual is a degenerate noise estimate.
        let y = DVector::from_row_slice(&[2.0, 2.0, 2.0]);
        let mu = DVector::from_element(1, 2.0);
        let sigma = DMatrix::from_element(1, 1, 0.5);
        assert!(matches!(
            hyper_update(&sigma, &mu, &[1.0], &phi, &y, 1e-8),
            Err(Error::DegenerateNoise(_))
        ));
    }

    fn sinc_data(n: usize, seed: u64, noise: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-10.0, 10.0).unwrap();
        let e = Normal::new(0.0, noise).unwrap();
        let x: Vec<f64> = (0..n).map(|_| u.sample(&mut rng)).collect();
        let y = x
            .iter()
            .map(|&v| if v == 0.0 { 1.0 } else { v.sin() / v } + e.sample(&mut rng))
            .collect();
        (x.into_iter().map(|v| vec![v]).collect(), y)
    }

    /// Kernel parameter for standardized inputs equivalent to `rho_raw` on
    /// the raw inputs.
    fn rho_for(inputs: &[Vec<f64>], rho_raw: f64) -> f64 {
        let col: Vec<f64> = inputs.iter().map(|r| r[0]).collect();
        rho_raw * sample_std(&col).powi(2)
    }

    #[test]
    fn sinc_benchmark() {
        let (x, y) = sinc_data(100, 7, 0.1);
        let cfg = RvrConfig {
            rho: Some(rho_for(&x, 0.25)),
            ..RvrConfig::default()
        };
        let (model, report) = train(&x, &y, &[], &cfg).unwrap();
        assert!(model.n_relevance_vectors() <= 15, "{} rvs", model.n_relevance_vectors());
        let (xt, _) = sinc_data(1000, 8, 0.1);
        let truth: Vec<f64> = xt.iter().map(|v| v[0].sin() / v[0]).collect();
        let m = evaluate(&model, &xt, &truth).unwrap();
        assert!(m.rmse <= 0.12, "rmse {}", m.rmse);
        assert!(report.converged);
        assert!(report.identity_residual <= 1e-6);
        assert!(report.active.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(train(&x, &y, &[], &cfg).unwrap().0, model);
    }

    #[test]
    fn predictive_variance_exceeds_noise() {
        let (x, y) = sinc_data(60, 9, 0.05);
        let (model, _) = train(&x, &y, &[], &RvrConfig::default()).unwrap();
        for v in [-12.0, -3.0, 0.1, 4.0, 30.0] {
            let e = model.predict(&[v]).unwrap();
            assert!(e.sigma >= model.noise_sigma() * (1.0 - 1e-12));
            assert!((e.interval.1 - e.mean - (e.mean - e.interval.0)).abs() < 1e-12);
        }
        let far = model.predict(&[1e4]).unwrap();
        if !model.offset_used {
            assert!((far.mean - model.y_mean).abs() < 1e-9);
        }
        assert!(model.predict(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn initial_alpha_matches_sample_count() {
        let (x, y) = sinc_data(100, 1, 0.1);
        let cfg = RvrConfig {
            n_iter_max: 1,
            ..RvrConfig::default()
        };
        // One iteration: the first posterior uses alpha = 1 / 101^2, which we
        // recover from the evidence of a hand-built posterior.
        let (_, report) = train(&x, &y, &[], &cfg).unwrap();
        let (xm, xs) = column_scales(&x, &[]).unwrap();
        let z: Vec<Vec<f64>> = x.iter().map(|r| vec![(r[0] - xm[0]) / xs[0]]).collect();
        let ym = mean(&y);
        let ys = sample_std(&y);
        let yv = DVector::from_iterator(100, y.iter().map(|v| (v - ym) / ys));
        let phi = build_design(&z, median_heuristic_rho(&z).unwrap(), true);
        let alpha = vec![1.0 / 101f64.powi(2); 101];
        assert!((alpha[0] - 9.803e-5).abs() < 1e-8);
        let (s, m) = posterior_update(&phi, &yv, &alpha, 100.0).unwrap();
        let r = (&yv - &phi * &m).norm_squared();
        let ev = log_evidence(&s, &m, &alpha, 100.0, r, 100);
        assert!((report.log_evidence[0] - ev).abs() < 1e-9 * ev.abs());
        assert_eq!(report.initial_alpha, alpha[0]);
        assert_eq!(report.initial_beta, 100.0);
    }

    #[test]
    fn model_file_round_trip() {
        let (x, y) = sinc_data(40, 2, 0.1);
        let (model, _) = train(&x, &y, &["x".to_string()], &RvrConfig::default()).unwrap();
        let back = RvrModel::from_toml(&model.to_toml().unwrap()).unwrap();
        assert_eq!(back, model);
        let text = model.to_toml().unwrap();
        for key in [
            "version", "rho", "beta", "offset_used", "alpha", "mu", "sigma", "rv", "x_mean", "x_std", "y_mean",
            "y_std", "converged", "feature_names",
        ] {
            assert!(text.contains(&format!("{key} =")), "missing {key}");
        }
        let broken = text.replace("version = 1", "version = 7");
        assert!(matches!(RvrModel::from_toml(&broken), Err(Error::ModelFormat(_))));
    }

    #[test]
    fn offset_vanishes_on_origin_linear_data() {
        let x: Vec<Vec<f64>> = (0..41).map(|i| vec![-1.0 + 0.05 * i as f64]).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v[0]).collect();
        let (model, _) = train(&x, &y, &[], &RvrConfig::default()).unwrap();
        assert!(!model.offset_used || model.mu[0].abs() <= 1e-3, "{:?}", model.mu);
        assert!(model.predict(&[0.0]).unwrap().mean.abs() < 1e-2);
    }

    #[test]
    fn perfect_predictions_have_full_coverage() {
        let e: Vec<SohEstimate> = [0.9, 0.95]
            .iter()
            .map(|&m| SohEstimate {
                mean: m,
                sigma: 0.01,
                interval: (m - 0.03, m + 0.03),
            })
            .collect();
        let m = metrics(&e, &[0.9, 0.95]).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.coverage_997, 1.0);
        assert!((m.avg_three_sigma - 0.03).abs() < 1e-15);
    }
}
