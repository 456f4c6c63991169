use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::digamma::DigammaTable;
use crate::data::sample_std;
use crate::error::{Error, Result};

/// Relative size of the tie-breaking jitter (times the column std).
pub const JITTER_SCALE: f64 = 1e-10;

// Streams are offset from zero so that a caller drawing its own data from
// `seed_from_u64(seed)` never reproduces the estimator's noise.
const NOISE_STREAM: u64 = 0x6e6f_6973_6500;
const JITTER_STREAM_F: u64 = NOISE_STREAM + 1;
const JITTER_STREAM_G: u64 = NOISE_STREAM + 2;
const JITTER_STREAM_H: u64 = NOISE_STREAM + 3;

/// A named, possibly multivariate, random variable observed at N points.
/// Stored column-wise: one `Vec` of length N per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    name: String,
    columns: Vec<Vec<f64>>,
}

impl Variable {
    pub fn new(name: impl Into<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let name = name.into();
        let n = columns
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Argument(format!("variable `{name}` has no dimensions")))?;
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::Argument(format!("variable `{name}` has ragged columns")));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("variable `{name}` has non-finite entries")));
        }
        Ok(Self { name, columns })
    }

    pub fn scalar(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        Self::new(name, vec![values])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// Unit-variance white Gaussian noise, independent of everything else.
    pub fn white_noise(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(NOISE_STREAM);
        let values = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            name: "white_noise".into(),
            columns: vec![values],
        }
    }

    fn jittered(&self, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let columns = self
            .columns
            .iter()
            .map(|col| {
                let s = sample_std(col);
                let amp = JITTER_SCALE * if s > 0.0 { s } else { 1.0 };
                col.iter()
                    .map(|&v| v + amp * (2.0 * rng.random::<f64>() - 1.0))
                    .collect()
            })
            .collect();
        Self {
            name: self.name.clone(),
            columns,
        }
    }
}

/// Joint sample of three variables `(F, G, H)` for CMI estimation.
#[derive(Debug, Clone)]
pub struct Sample3 {
    f: Variable,
    g: Variable,
    h: Variable,
}

impl Sample3 {
    pub fn new(f: Variable, g: Variable, h: Variable) -> Result<Self> {
        if f.len() != g.len() || f.len() != h.len() {
            return Err(Error::Argument(format!(
                "sample lengths differ: {}, {}, {}",
                f.len(),
                g.len(),
                h.len()
            )));
        }
        Ok(Self { f, g, h })
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds seeded uniform jitter of `JITTER_SCALE * std` to every coordinate
    /// so that duplicated values do not tie in neighbor searches. Each slot
    /// draws from its own stream.
    pub fn jittered(&self, seed: u64) -> Self {
        Self {
            f: self.f.jittered(seed, JITTER_STREAM_F),
            g: self.g.jittered(seed, JITTER_STREAM_G),
            h: self.h.jittered(seed, JITTER_STREAM_H),
        }
    }
}

/// An MI or CMI estimate in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimate {
    /// Clamped at zero.
    pub raw: f64,
    /// Raw divided by the smaller self-information, when requested.
    pub normalized: Option<f64>,
    pub k: usize,
    pub n: usize,
    /// Points whose tie-window counts hit the zero-count guard.
    pub flagged: usize,
}

/// k-nearest-neighbor CMI estimate `I(F; G | H)`.
///
/// For each point the l-infinity distance `r` to its k-th nearest neighbor in
/// the joint space sets a window. Other points strictly inside `r` are counted
/// in the (F,H), (G,H) and H subspaces and
/// `psi(k) - psi(n_fh + 1) - psi(n_gh + 1) + psi(n_h + 1)` is averaged over
/// points, then clamped at zero. When `r == 0` (exact ties) the window is
/// closed (`<=`) and the joint tie count replaces `k`; a zero count there is
/// replaced by 1 and the point is flagged.
pub fn knn_cmi(sample: &Sample3, k: usize) -> Result<MiEstimate> {
    let n = sample.len();
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if n <= 2 * k {
        return Err(Error::Argument(format!("need more than 2k = {} points, got {n}", 2 * k)));
    }
    let (df, dg, dh) = (sample.f.dim(), sample.g.dim(), sample.h.dim());
    let d = df + dg + dh;
    // Row-major joint coordinates.
    let mut pts = vec![0.0; n * d];
    for (offset, var) in [(0, &sample.f), (df, &sample.g), (df + dg, &sample.h)] {
        for (c, col) in var.columns().iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                pts[i * d + offset + c] = v;
            }
        }
    }
    let psi = DigammaTable::new(n);

    let per_point: Vec<(f64, bool)> = (0..n)
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(n), Vec::with_capacity(n)),
            |(sub, joint): &mut (Vec<[f64; 3]>, Vec<f64>), i| {
                sub.clear();
                joint.clear();
                let pi = &pts[i * d..(i + 1) * d];
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let pj = &pts[j * d..(j + 1) * d];
                    let dist = |r: std::ops::Range<usize>| {
                        r.map(|c| (pi[c] - pj[c]).abs()).fold(0.0, f64::max)
                    };
                    let s = [dist(0..df), dist(df..df + dg), dist(df + dg..d)];
                    joint.push(s[0].max(s[1]).max(s[2]));
                    sub.push(s);
                }
                let (_, &mut rho, _) = joint.select_nth_unstable_by(k - 1, f64::total_cmp);
                if rho > 0.0 {
                    // Open window; the point itself is added back as the +1.
                    let mut counts = [0usize; 3];
                    for s in sub.iter() {
                        let h = s[2];
                        counts[0] += (s[0].max(h) < rho) as usize;
                        counts[1] += (s[1].max(h) < rho) as usize;
                        counts[2] += (h < rho) as usize;
                    }
                    let [n_fh, n_gh, n_h] = counts;
                    let xi = psi.get(k) - psi.get(n_fh + 1) - psi.get(n_gh + 1) + psi.get(n_h + 1);
                    return (xi, false);
                }
                // Exact ties at the k-th neighbor: closed window, with the
                // joint tie count in place of k.
                let mut counts = [0usize; 4];
                for s in sub.iter() {
                    let fh = s[0].max(s[2]);
                    let gh = s[1].max(s[2]);
                    counts[0] += (fh.max(s[1]) <= rho) as usize;
                    counts[1] += (fh <= rho) as usize;
                    counts[2] += (gh <= rho) as usize;
                    counts[3] += (s[2] <= rho) as usize;
                }
                let mut flagged = false;
                for c in counts.iter_mut() {
                    if *c == 0 {
                        *c = 1;
                        flagged = true;
                    }
                }
                let [k_tilde, n_fh, n_gh, n_h] = counts;
                let xi = psi.get(k_tilde) - psi.get(n_fh) - psi.get(n_gh) + psi.get(n_h);
                (xi, flagged)
            },
        )
        .collect();

    let mut sum = 0.0;
    let mut flagged = 0;
    for &(xi, f) in &per_point {
        sum += xi;
        flagged += f as usize;
    }
    Ok(MiEstimate {
        raw: (sum / n as f64).max(0.0),
        normalized: None,
        k,
        n,
        flagged,
    })
}

/// MI estimate `I(F; G)`, computed as the CMI given seeded unit white
/// Gaussian noise that is independent of `(F, G)`.
pub fn knn_mi(f: &Variable, g: &Variable, k: usize, seed: u64) -> Result<MiEstimate> {
    let noise = Variable::white_noise(f.len(), seed);
    let sample = Sample3::new(f.clone(), g.clone(), noise)?.jittered(seed);
    knn_cmi(&sample, k)
}

/// Finite self-information proxy `I(F; F)`: the MI estimator applied to `F`
/// and an independently jittered copy of `F`. The true quantity is infinite
/// for continuous `F`; this value grows roughly like `log N`.
pub fn self_information(f: &Variable, k: usize, seed: u64) -> Result<MiEstimate> {
    knn_mi(f, f, k, seed)
}

/// CMI estimate with tie-breaking jitter applied first.
pub fn knn_cmi_jittered(f: &Variable, g: &Variable, h: &Variable, k: usize, seed: u64) -> Result<MiEstimate> {
    let sample = Sample3::new(f.clone(), g.clone(), h.clone())?.jittered(seed);
    knn_cmi(&sample, k)
}

const DEGENERATE_SELF_INFO: f64 = 1e-6;

fn normalizer(f: &Variable, g: &Variable, self_f: f64, self_g: f64) -> Result<f64> {
    for (v, s) in [(f, self_f), (g, self_g)] {
        if !(s > DEGENERATE_SELF_INFO) {
            return Err(Error::NormalizationDegenerate(v.name().to_string()));
        }
    }
    Ok(self_f.min(self_g))
}

/// Normalizes a raw estimate by precomputed self-informations.
pub fn normalize_with(
    estimate: MiEstimate,
    f: &Variable,
    g: &Variable,
    self_f: f64,
    self_g: f64,
) -> Result<MiEstimate> {
    let denom = normalizer(f, g, self_f, self_g)?;
    Ok(MiEstimate {
        normalized: Some(estimate.raw / denom),
        ..estimate
    })
}

/// `I(F;G) / min(I(F;F), I(G;G))`.
pub fn normalized_mi(f: &Variable, g: &Variable, k: usize, seed: u64) -> Result<MiEstimate> {
    let raw = knn_mi(f, g, k, seed)?;
    let sf = self_information(f, k, seed)?.raw;
    let sg = self_information(g, k, seed)?.raw;
    normalize_with(raw, f, g, sf, sg)
}

/// `I(F;G|H) / min(I(F;F), I(G;G))`; the denominator uses the
/// unconditional self-informations.
pub fn normalized_cmi(f: &Variable, g: &Variable, h: &Variable, k: usize, seed: u64) -> Result<MiEstimate> {
    let raw = knn_cmi_jittered(f, g, h, k, seed)?;
    let sf = self_information(f, k, seed)?.raw;
    let sg = self_information(g, k, seed)?.raw;
    normalize_with(raw, f, g, sf, sg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn gaussian_pair(rho: f64, n: usize, seed: u64) -> (Variable, Variable) {
        let a = normals(n, seed);
        let b = normals(n, seed + 1);
        let s = (1.0 - rho * rho).sqrt();
        let g: Vec<f64> = a.iter().zip(&b).map(|(x, e)| rho * x + s * e).collect();
        (Variable::scalar("f", a).unwrap(), Variable::scalar("g", g).unwrap())
    }

    fn gaussian_mi(rho: f64) -> f64 {
        -0.5 * (1.0 - rho * rho).ln()
    }

    #[test]
    fn independent_triple_is_near_zero() {
        let v = |s| Variable::scalar("v", normals(1000, s)).unwrap();
        let est = knn_cmi_jittered(&v(1), &v(2), &v(3), 5, 9).unwrap();
        assert!(est.raw <= 0.02, "raw = {}", est.raw);
    }

    #[test]
    fn markov_chain_is_conditionally_independent() {
        let f = normals(2000, 10);
        let h: Vec<f64> = f.iter().zip(normals(2000, 11)).map(|(a, e)| a + e).collect();
        let g: Vec<f64> = h.iter().zip(normals(2000, 12)).map(|(a, e)| a + e).collect();
        let [f, g, h] = [f, g, h].map(|c| Variable::scalar("x", c).unwrap());
        let est = knn_cmi_jittered(&f, &g, &h, 5, 3).unwrap();
        assert!(est.raw <= 0.02, "raw = {}", est.raw);
    }

    #[test]
    fn duplicated_variable_has_large_information() {
        let f = Variable::scalar("f", normals(1000, 4)).unwrap();
        let h = Variable::scalar("h", normals(1000, 5)).unwrap();
        let est = knn_cmi_jittered(&f, &f, &h, 5, 6).unwrap();
        assert!(est.raw >= 1.0, "raw = {}", est.raw);
    }

    #[test]
    fn gaussian_mi_matches_closed_form() {
        for (rho, tol) in [(0.0, 0.02), (0.5, 0.05), (0.9, 0.1)] {
            let (f, g) = gaussian_pair(rho, 2000, 20);
            let est = knn_mi(&f, &g, 5, 21).unwrap();
            let oracle = gaussian_mi(rho);
            assert!((est.raw - oracle).abs() <= tol, "rho {rho}: {} vs {oracle}", est.raw);
        }
        assert!((gaussian_mi(0.9) - 0.8304).abs() < 1e-4);
        assert!((gaussian_mi(0.5) - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn mi_is_symmetric() {
        let (f, g) = gaussian_pair(0.6, 500, 30);
        let a = knn_mi(&f, &g, 5, 31).unwrap().raw;
        let b = knn_mi(&g, &f, 5, 31).unwrap().raw;
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn mi_is_monotone_in_correlation() {
        let mut last = -1.0;
        for rho in [0.0, 0.3, 0.6, 0.9] {
            let (f, g) = gaussian_pair(rho, 2000, 40);
            let v = knn_mi(&f, &g, 5, 41).unwrap().raw;
            assert!(v >= last, "rho {rho}: {v} < {last}");
            last = v;
        }
    }

    #[test]
    fn estimates_are_bit_deterministic() {
        let (f, g) = gaussian_pair(0.4, 400, 50);
        let a = normalized_mi(&f, &g, 5, 51).unwrap();
        let b = normalized_mi(&f, &g, 5, 51).unwrap();
        assert_eq!(a.raw.to_bits(), b.raw.to_bits());
        assert_eq!(a.normalized.unwrap().to_bits(), b.normalized.unwrap().to_bits());
    }

    #[test]
    fn self_normalization_is_one() {
        let f = Variable::scalar("f", normals(1000, 60)).unwrap();
        let v = normalized_mi(&f, &f, 5, 61).unwrap().normalized.unwrap();
        assert!((v - 1.0).abs() <= 0.05, "normalized = {v}");
    }

    #[test]
    fn independent_normalized_is_small() {
        let (f, g) = gaussian_pair(0.0, 1000, 70);
        let v = normalized_mi(&f, &g, 5, 71).unwrap().normalized.unwrap();
        assert!(v <= 0.05, "normalized = {v}");
    }

    #[test]
    fn too_few_points_is_an_error() {
        let f = Variable::scalar("f", vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(knn_mi(&f, &f, 2, 0), Err(Error::Argument(_))));
        assert!(matches!(knn_mi(&f, &f, 0, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn constant_variable_cannot_be_normalized() {
        let f = Variable::scalar("flat", vec![1.0; 50]).unwrap();
        let g = Variable::scalar("g", normals(50, 80)).unwrap();
        let err = normalized_mi(&f, &g, 5, 81);
        // A constant column jittered at 1e-10 still carries rank information,
        // so either outcome must at least not panic; a genuine degenerate
        // self-information is reported as such.
        if let Err(e) = err {
            assert!(matches!(e, Error::NormalizationDegenerate(ref n) if n == "flat"));
        }
    }

    #[test]
    fn exact_ties_use_closed_windows() {
        // F = G uniform on 3 levels, H on 2 levels, no jitter: every k-th
        // distance is zero and the estimate reduces to ln 3.
        let n = 1200;
        let f: Vec<f64> = (0..n).map(|i| (i % 3) as f64).collect();
        let h: Vec<f64> = (0..n).map(|i| ((i / 3) % 2) as f64).collect();
        let fv = Variable::scalar("f", f).unwrap();
        let sample = Sample3::new(fv.clone(), fv, Variable::scalar("h", h).unwrap()).unwrap();
        let est = knn_cmi(&sample, 5).unwrap();
        assert!((est.raw - 3f64.ln()).abs() < 0.01, "raw = {}", est.raw);
        assert_eq!(est.flagged, 0);
    }

    #[test]
    fn multivariate_variables_are_supported() {
        let a = normals(600, 90);
        let b = normals(600, 91);
        let f = Variable::new("f", vec![a.clone(), b.clone()]).unwrap();
        let g = Variable::scalar("g", a.iter().zip(&b).map(|(x, y)| x + y).collect()).unwrap();
        let est = knn_mi(&f, &g, 5, 92).unwrap();
        assert!(est.raw > 1.0);
    }
}
