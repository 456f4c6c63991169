//! Seeded inputs shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use soh_core::data::QvProfile;
use soh_core::info::{Sample3, Variable};
use soh_core::synth::{synth_module_profile, CellSpec, ChargeProtocol};

/// Gaussian chain `F -> H -> G` with `n` samples.
pub fn chain_sample(n: usize, seed: u64) -> Sample3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let f: Vec<f64> = (0..n).map(|_| draw()).collect();
    let h: Vec<f64> = f.iter().map(|v| v + 0.5 * draw()).collect();
    let g: Vec<f64> = h.iter().map(|v| v + 0.5 * draw()).collect();
    Sample3::new(
        Variable::scalar("F", f).unwrap(),
        Variable::scalar("G", g).unwrap(),
        Variable::scalar("H", h).unwrap(),
    )
    .unwrap()
}

/// Noisy sinc on `[-10, 10]`.
pub fn sinc(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(-10.0, 10.0).unwrap();
    let x: Vec<f64> = (0..n).map(|_| u.sample(&mut rng)).collect();
    let y = x
        .iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v.sin() / v + 0.1 * e
        })
        .collect();
    (x.into_iter().map(|v| vec![v]).collect(), y)
}

/// A three-cell module charge with `n` samples.
pub fn module_profile(n: usize) -> QvProfile {
    let cell = CellSpec::default();
    let cells = [cell.aged(0.02, 0.3), cell.aged(0.05, 0.3), cell.aged(0.08, 0.3)];
    let protocol = ChargeProtocol {
        current: 0.33 * 3.0 * cell.capacity,
        v_start: 3.4,
        v_end: 4.1,
        n_samples: n,
        noise_sigma_v: 1e-3,
        temperature_c: 25.0,
    };
    synth_module_profile(&cells, &protocol, 5, "bench", 0, Some(0.95)).unwrap()
}
