use crate::error::{Error, Result};

/// Euler-Mascheroni constant; `digamma(1) = -EULER_GAMMA`.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Digamma function for positive arguments.
///
/// Shifts the argument above 10 with `psi(x) = psi(x + 1) - 1/x` and then
/// evaluates the asymptotic expansion; absolute error is below 1e-13 for
/// `x >= 1`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("digamma undefined at {x}")));
    }
    Ok(digamma_positive(x))
}

pub(crate) fn digamma_positive(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number series: 1/12, 1/120, 1/252, 1/240, 1/132, 691/32760.
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * 691.0 / 32760.0)))));
    acc + x.ln() - 0.5 * inv - series
}

/// `psi(n)` for integer counts `1..=max`, via `psi(n + 1) = psi(n) + 1/n`.
#[derive(Debug, Clone)]
pub(crate) struct DigammaTable {
    values: Vec<f64>,
}

impl DigammaTable {
    pub fn new(max: usize) -> Self {
        let mut values = Vec::with_capacity(max + 1);
        values.push(f64::NAN);
        let mut psi = -EULER_GAMMA;
        for n in 1..=max {
            values.push(psi);
            psi += 1.0 / n as f64;
        }
        Self { values }
    }

    pub fn get(&self, n: usize) -> f64 {
        self.values[n]
    }
}
