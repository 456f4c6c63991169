use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    /// sup |ECDF_a - ECDF_b|, in [0, 1].
    pub statistic: f64,
    /// Asymptotic p-value from the Kolmogorov distribution.
    pub p_value: f64,
}

/// Two-sample Kolmogorov-Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("KS test needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Argument("KS test sample contains NaN".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());

    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n as f64 * m as f64) / (n + m) as f64;
    let sq = ne.sqrt();
    let p_value = kolmogorov_survival((sq + 0.12 + 0.11 / sq) * d);
    Ok(KsResult {
        statistic: d,
        p_value,
    })
}

/// P(K > lambda) for the Kolmogorov distribution.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Small-lambda form of the CDF converges fast here.
        let y = (-std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda
            * (y + y.powi(9) + y.powi(25) + y.powi(49));
        (1.0 - cdf).clamp(0.0, 1.0)
    } else {
        let x = (-2.0 * lambda * lambda).exp();
        let s = x - x.powi(4) + x.powi(9) - x.powi(16);
        (2.0 * s).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Brute-force ECDF distance evaluated at every pooled sample point.
    fn ecdf_distance(a: &[f64], b: &[f64]) -> f64 {
        let ecdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        a.iter()
            .chain(b)
            .map(|&x| (ecdf(a, x) - ecdf(b, x)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn identical_samples_have_zero_statistic() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = ks_two_sample(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn shifted_uniforms_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..500).map(|_| 0.5 + rng.random::<f64>()).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        let oracle = ecdf_distance(&a, &b);
        assert!((r.statistic - oracle).abs() < 1e-12);
        assert!(r.statistic >= 0.4);
        assert!(r.p_value < 1e-10);
    }

    #[test]
    fn statistic_matches_brute_force_with_ties() {
        let a = [1.0, 1.0, 2.0, 3.0, 3.0, 3.0];
        let b = [1.0, 2.0, 2.0, 4.0];
        let r = ks_two_sample(&a, &b).unwrap();
        assert!((r.statistic - ecdf_distance(&a, &b)).abs() < 1e-15);
    }

    #[test]
    fn same_distribution_is_rarely_rejected() {
        let mut passes = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let a: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
            if ks_two_sample(&a, &b).unwrap().p_value > 0.01 {
                passes += 1;
            }
        }
        assert!(passes >= 95, "only {passes} of 100 trials passed");
    }

    #[test]
    fn survival_function_is_continuous_at_switch() {
        let lo = kolmogorov_survival(1.18 - 1e-9);
        let hi = kolmogorov_survival(1.18 + 1e-9);
        assert!((lo - hi).abs() < 1e-6);
        // Reference value P(K > 1.36) ~= 0.0494 (the classic 5% critical point).
        assert!((kolmogorov_survival(1.36) - 0.0494).abs() < 5e-4);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(ks_two_sample(&[], &[1.0]).is_err());
    }
}
