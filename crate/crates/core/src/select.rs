//! Forward feature selection by relevance, redundancy and complementarity,
//! with removal of completely redundant features.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;

use crate::data::{map_csv_io, mean, sample_std, FeatureTable};
use crate::error::{Error, Result};
use crate::info::{knn_cmi_jittered, knn_mi, normalize_with, self_information, MiEstimate, Variable};

pub const DEFAULT_THRESHOLD: f64 = 0.9;
pub const DEFAULT_K: usize = 5;

/// The three normalized terms of the selection criterion and their
/// combination `J = relevance - avg_redundancy + avg_complementarity`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionValue {
    pub j: f64,
    pub relevance: f64,
    pub avg_redundancy: f64,
    pub avg_complementarity: f64,
}

impl CriterionValue {
    fn combine(relevance: f64, redundancy: &[f64], complementarity: &[f64]) -> Self {
        let (avg_redundancy, avg_complementarity) = if redundancy.is_empty() {
            (0.0, 0.0)
        } else {
            let n = redundancy.len() as f64;
            (redundancy.iter().sum::<f64>() / n, complementarity.iter().sum::<f64>() / n)
        };
        Self {
            j: relevance - avg_redundancy + avg_complementarity,
            relevance,
            avg_redundancy,
            avg_complementarity,
        }
    }
}

fn standardized(name: &str, values: Vec<f64>) -> Result<Variable> {
    let m = mean(&values);
    let s = sample_std(&values);
    let scale = if s > 0.0 { 1.0 / s } else { 1.0 };
    Variable::scalar(name, values.into_iter().map(|v| (v - m) * scale).collect())
}

fn normalized(est: MiEstimate, f: &Variable, g: &Variable, sf: f64, sg: f64) -> Result<f64> {
    Ok(normalize_with(est, f, g, sf, sg)?.normalized.unwrap_or(0.0))
}

/// Criterion for one candidate against already selected features, computed
/// directly from complete columns (standardized internally).
pub fn criterion_j(
    candidate: &Variable,
    selected: &[Variable],
    label: &Variable,
    k: usize,
    seed: u64,
) -> Result<CriterionValue> {
    let z = |v: &Variable| standardized(v.name(), v.columns()[0].clone());
    let x = z(candidate)?;
    let y = z(label)?;
    let sx = self_information(&x, k, seed)?.raw;
    let sy = self_information(&y, k, seed)?.raw;
    let relevance = normalized(knn_mi(&x, &y, k, seed)?, &x, &y, sx, sy)?;
    let mut red = Vec::new();
    let mut comp = Vec::new();
    for s in selected {
        let s = z(s)?;
        let ss = self_information(&s, k, seed)?.raw;
        red.push(normalized(knn_mi(&x, &s, k, seed)?, &x, &s, sx, ss)?);
        comp.push(normalized(knn_cmi_jittered(&x, &s, &y, k, seed)?, &x, &s, sx, ss)?);
    }
    Ok(CriterionValue::combine(relevance, &red, &comp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Col {
    Feature(usize),
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Quantity {
    /// Normalized MI between two columns (ordered key).
    Mi(Col, Col),
    /// Normalized CMI of two features given the label (ordered key).
    Cmi(usize, usize),
}

fn ordered(a: Col, b: Col) -> (Col, Col) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Normalized MI/CMI values over a feature table, each computed once.
/// Rows with a masked entry in any column a quantity involves are dropped
/// for that quantity only.
pub struct PairCache<'a> {
    table: &'a FeatureTable,
    labels: Option<&'a [f64]>,
    k: usize,
    seed: u64,
    values: HashMap<Quantity, f64>,
}

impl<'a> PairCache<'a> {
    pub fn new(table: &'a FeatureTable, k: usize, seed: u64) -> Self {
        Self {
            table,
            labels: table.labels(),
            k,
            seed,
            values: HashMap::new(),
        }
    }

    fn rows(&self, cols: &[Col]) -> Vec<usize> {
        let avail = self.table.available();
        (0..self.table.n_rows())
            .filter(|&i| {
                cols.iter().all(|c| match c {
                    Col::Feature(j) => avail[i][*j],
                    Col::Label => true,
                })
            })
            .collect()
    }

    fn variable(&self, col: Col, rows: &[usize]) -> Result<Variable> {
        match col {
            Col::Feature(j) => standardized(
                &self.table.feature_names()[j],
                rows.iter().map(|&i| self.table.rows()[i][j]).collect(),
            ),
            Col::Label => {
                let y = self
                    .labels
                    .ok_or_else(|| Error::Argument("feature table carries no SOH labels".into()))?;
                standardized("soh", rows.iter().map(|&i| y[i]).collect())
            }
        }
    }

    fn compute(&self, q: Quantity) -> Result<f64> {
        let (k, seed) = (self.k, self.seed);
        let (a, b, cond) = match q {
            Quantity::Mi(a, b) => (a, b, false),
            Quantity::Cmi(i, j) => (Col::Feature(i), Col::Feature(j), true),
        };
        let mut cols = vec![a, b];
        if cond {
            cols.push(Col::Label);
        }
        let rows = self.rows(&cols);
        let f = self.variable(a, &rows)?;
        let g = self.variable(b, &rows)?;
        let sf = self_information(&f, k, seed)?.raw;
        let sg = if a == b { sf } else { self_information(&g, k, seed)?.raw };
        let est = if cond {
            knn_cmi_jittered(&f, &g, &self.variable(Col::Label, &rows)?, k, seed)?
        } else {
            knn_mi(&f, &g, k, seed)?
        };
        normalized(est, &f, &g, sf, sg)
    }

    /// Computes every missing quantity in parallel, then stores them.
    fn fill(&mut self, wanted: impl IntoIterator<Item = Quantity>) -> Result<()> {
        let missing: BTreeSet<_> = wanted
            .into_iter()
            .filter(|q| !self.values.contains_key(q))
            .collect();
        let computed = missing
            .into_par_iter()
            .map(|q| self.compute(q).map(|v| (q, v)))
            .collect::<Result<Vec<_>>>()?;
        self.values.extend(computed);
        Ok(())
    }

    fn mi_key(a: Col, b: Col) -> Quantity {
        let (a, b) = ordered(a, b);
        Quantity::Mi(a, b)
    }

    fn cmi_key(i: usize, j: usize) -> Quantity {
        Quantity::Cmi(i.min(j), i.max(j))
    }

    pub fn relevance(&mut self, i: usize) -> Result<f64> {
        let q = Self::mi_key(Col::Feature(i), Col::Label);
        self.fill([q])?;
        Ok(self.values[&q])
    }

    pub fn redundancy(&mut self, i: usize, j: usize) -> Result<f64> {
        let q = Self::mi_key(Col::Feature(i), Col::Feature(j));
        self.fill([q])?;
        Ok(self.values[&q])
    }

    pub fn complementarity(&mut self, i: usize, j: usize) -> Result<f64> {
        let q = Self::cmi_key(i, j);
        self.fill([q])?;
        Ok(self.values[&q])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub threshold: f64,
    pub k: usize,
    pub seed: u64,
    /// Features placed first in the ranking, in this order.
    pub preselected: Vec<String>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            k: DEFAULT_K,
            seed: 0,
            preselected: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedFeature {
    pub name: String,
    pub preselected: bool,
    /// Criterion at the iteration that selected it; `None` for preselected
    /// features.
    pub score: Option<CriterionValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemovedFeature {
    pub name: String,
    /// The selected feature it was completely redundant to.
    pub removed_by: String,
    pub normalized_mi: f64,
    /// 0 for removal against preselected features before the first
    /// iteration.
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub candidates: Vec<(String, CriterionValue)>,
    pub winner: String,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CriterionTrace {
    pub iterations: Vec<IterationTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Ranked.
    pub selected: Vec<SelectedFeature>,
    pub removed: Vec<RemovedFeature>,
    pub trace: CriterionTrace,
}

impl Selection {
    pub fn ranked_names(&self) -> Vec<String> {
        self.selected.iter().map(|s| s.name.clone()).collect()
    }
}

/// Greedy forward selection. Each iteration moves the candidate with the
/// largest criterion (ties broken by name) into the ranking, then removes
/// every remaining candidate whose normalized MI with it reaches the
/// threshold.
pub fn select_features(table: &FeatureTable, config: &SelectionConfig) -> Result<Selection> {
    if table.n_features() == 0 {
        return Err(Error::Argument("feature table has no features".into()));
    }
    table.require_labels()?;
    if !(config.threshold > 0.0 && config.threshold.is_finite()) {
        return Err(Error::Argument(format!(
            "threshold must be positive, got {}",
            config.threshold
        )));
    }
    if config.k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let names = table.feature_names();
    let mut cache = PairCache::new(table, config.k, config.seed);

    let mut selected: Vec<usize> = Vec::new();
    for name in &config.preselected {
        let j = table
            .column_index(name)
            .ok_or_else(|| Error::Argument(format!("preselected feature `{name}` is not in the table")))?;
        if selected.contains(&j) {
            return Err(Error::Argument(format!("feature `{name}` preselected twice")));
        }
        selected.push(j);
    }
    let n_pre = selected.len();
    let mut scores: Vec<Option<CriterionValue>> = vec![None; n_pre];
    let mut candidates: Vec<usize> = (0..names.len()).filter(|j| !selected.contains(j)).collect();
    let mut removed = Vec::new();
    let mut trace = CriterionTrace::default();

    let remove_redundant = |cache: &mut PairCache,
                                candidates: &mut Vec<usize>,
                                removed: &mut Vec<RemovedFeature>,
                                by: usize,
                                iteration: usize|
     -> Result<Vec<String>> {
        cache.fill(candidates.iter().map(|&c| PairCache::mi_key(Col::Feature(by), Col::Feature(c))))?;
        let mut gone = Vec::new();
        let mut keep = Vec::new();
        for &c in candidates.iter() {
            let mi = cache.redundancy(by, c)?;
            if mi >= config.threshold {
                removed.push(RemovedFeature {
                    name: names[c].clone(),
                    removed_by: names[by].clone(),
                    normalized_mi: mi,
                    iteration,
                });
                gone.push(names[c].clone());
            } else {
                keep.push(c);
            }
        }
        *candidates = keep;
        Ok(gone)
    };

    for &s in &selected.clone() {
        remove_redundant(&mut cache, &mut candidates, &mut removed, s, 0)?;
    }

    while !candidates.is_empty() {
        let mut wanted: Vec<Quantity> = Vec::new();
        for &c in &candidates {
            wanted.push(PairCache::mi_key(Col::Feature(c), Col::Label));
            for &s in &selected {
                wanted.push(PairCache::mi_key(Col::Feature(c), Col::Feature(s)));
                wanted.push(PairCache::cmi_key(c, s));
            }
        }
        cache.fill(wanted)?;
        let mut evaluated = Vec::with_capacity(candidates.len());
        for &c in &candidates {
            let relevance = cache.relevance(c)?;
            let mut red = Vec::with_capacity(selected.len());
            let mut comp = Vec::with_capacity(selected.len());
            for &s in &selected {
                red.push(cache.redundancy(c, s)?);
                comp.push(cache.complementarity(c, s)?);
            }
            evaluated.push((c, CriterionValue::combine(relevance, &red, &comp)));
        }
        let &(winner, score) = evaluated
            .iter()
            .max_by(|(a, x), (b, y)| x.j.total_cmp(&y.j).then_with(|| names[*b].cmp(&names[*a])))
            .expect("candidates are non-empty");
        selected.push(winner);
        scores.push(Some(score));
        candidates.retain(|&c| c != winner);
        let iteration = trace.iterations.len() + 1;
        let gone = remove_redundant(&mut cache, &mut candidates, &mut removed, winner, iteration)?;
        trace.iterations.push(IterationTrace {
            candidates: evaluated.iter().map(|(c, v)| (names[*c].clone(), *v)).collect(),
            winner: names[winner].clone(),
            removed: gone,
        });
    }

    Ok(Selection {
        selected: selected
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(rank, (&j, score))| SelectedFeature {
                name: names[j].clone(),
                preselected: rank < n_pre,
                score,
            })
            .collect(),
        removed,
        trace,
    })
}

/// Pairwise normalized MI between features and normalized CMI of each
/// feature pair given the label. Diagonals hold the self-terms.
pub fn mi_matrices(table: &FeatureTable, k: usize, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    table.require_labels()?;
    let p = table.n_features();
    let mut cache = PairCache::new(table, k, seed);
    let mut wanted = Vec::new();
    for i in 0..p {
        for j in i..p {
            wanted.push(PairCache::mi_key(Col::Feature(i), Col::Feature(j)));
            wanted.push(PairCache::cmi_key(i, j));
        }
    }
    cache.fill(wanted)?;
    let mut mi = vec![vec![0.0; p]; p];
    let mut cmi = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in 0..p {
            mi[i][j] = cache.redundancy(i, j)?;
            cmi[i][j] = cache.complementarity(i, j)?;
        }
    }
    Ok((mi, cmi))
}

/// Writes a square matrix with feature names as the header and first column.
pub fn write_matrix(path: &Path, names: &[String], m: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    let mut header = vec!["feature".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in names.iter().zip(m) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Ranking CSV: `rank, feature, J, relevance, redundancy, complementarity,
/// preselected`.
pub fn write_selection(path: &Path, selection: &Selection) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    w.write_record([
        "rank",
        "feature",
        "J",
        "relevance",
        "redundancy",
        "complementarity",
        "preselected",
    ])?;
    for (i, s) in selection.selected.iter().enumerate() {
        let sc = s.score;
        w.write_record([
            (i + 1).to_string(),
            s.name.clone(),
            opt(sc.map(|c| c.j)),
            opt(sc.map(|c| c.relevance)),
            opt(sc.map(|c| c.avg_redundancy)),
            opt(sc.map(|c| c.avg_complementarity)),
            s.preselected.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Feature names of a ranking CSV in rank order.
pub fn read_ranked_names(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = r.headers()?.clone();
    let (ri, fi) = match (
        headers.iter().position(|h| h == "rank"),
        headers.iter().position(|h| h == "feature"),
    ) {
        (Some(ri), Some(fi)) => (ri, fi),
        _ => {
            return Err(Error::Schema(format!(
                "{}: expected `rank` and `feature` columns",
                path.display()
            )))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let rank: usize = rec[ri]
            .parse()
            .map_err(|_| Error::Schema(format!("{}: bad rank `{}`", path.display(), &rec[ri])))?;
        rows.push((rank, rec[fi].to_string()));
    }
    rows.sort();
    if rows.is_empty() {
        return Err(Error::EmptyOutput(format!("{}: no ranked features", path.display())));
    }
    Ok(rows.into_iter().map(|(_, n)| n).collect())
}

/// Removed-set CSV: `feature, removed_by, normalized_mi, iteration`.
pub fn write_removed(path: &Path, selection: &Selection) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    w.write_record(["feature", "removed_by", "normalized_mi", "iteration"])?;
    for r in &selection.removed {
        w.write_record([
            r.name.clone(),
            r.removed_by.clone(),
            r.normalized_mi.to_string(),
            r.iteration.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Every criterion evaluation: `iteration, candidate, J, relevance,
/// redundancy, complementarity, winner`.
pub fn write_trace(path: &Path, trace: &CriterionTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    w.write_record([
        "iteration",
        "candidate",
        "J",
        "relevance",
        "redundancy",
        "complementarity",
        "winner",
    ])?;
    for (i, it) in trace.iterations.iter().enumerate() {
        for (name, c) in &it.candidates {
            w.write_record([
                (i + 1).to_string(),
                name.clone(),
                c.j.to_string(),
                c.relevance.to_string(),
                c.avg_redundancy.to_string(),
                c.avg_complementarity.to_string(),
                (*name == it.winner).to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn table(cols: Vec<(&str, Vec<f64>)>, y: Vec<f64>) -> FeatureTable {
        let n = y.len();
        let names = cols.iter().map(|(n, _)| n.to_string()).collect();
        let rows = (0..n).map(|i| cols.iter().map(|(_, c)| c[i]).collect()).collect();
        let ids = (0..n)
            .map(|i| SampleId {
                source_id: "s".into(),
                cycle: i as u32,
            })
            .collect();
        FeatureTable::new(names, ids, rows, Some(y)).unwrap()
    }

    fn planted(n: usize) -> FeatureTable {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let u = Uniform::new(-3.0, 3.0).unwrap();
        let x1: Vec<f64> = (0..n).map(|_| u.sample(&mut rng)).collect();
        let x2 = normals(n, 42);
        let e = normals(n, 43);
        let x3: Vec<f64> = x1.iter().map(|v| 2.0 * v).collect();
        let x4 = normals(n, 44);
        let y = (0..n).map(|i| x1[i].sin() + 0.5 * x2[i] + 0.1 * e[i]).collect();
        table(vec![("x1", x1), ("x2", x2), ("x3", x3), ("x4", x4)], y)
    }

    #[test]
    fn empty_selection_gives_relevance() {
        let t = planted(400);
        let x = Variable::scalar("x2", t.rows().iter().map(|r| r[1]).collect()).unwrap();
        let y = Variable::scalar("y", t.labels().unwrap().to_vec()).unwrap();
        let c = criterion_j(&x, &[], &y, 5, 3).unwrap();
        assert_eq!(c.j, c.relevance);
        assert_eq!(c.avg_redundancy, 0.0);
    }

    #[test]
    fn duplicate_candidate_is_penalized() {
        let t = planted(400);
        let col = |j: usize, name: &str| Variable::scalar(name, t.rows().iter().map(|r| r[j]).collect()).unwrap();
        let y = Variable::scalar("y", t.labels().unwrap().to_vec()).unwrap();
        let c = criterion_j(&col(2, "x3"), &[col(0, "x1")], &y, 5, 3).unwrap();
        assert!((c.avg_redundancy - 1.0).abs() < 0.1, "{c:?}");
        assert!(c.j < c.relevance, "{c:?}");
    }

    #[test]
    fn independent_candidate_scores_near_zero() {
        let n = 1000;
        let y = Variable::scalar("y", normals(n, 1)).unwrap();
        let s = Variable::scalar("s", normals(n, 2)).unwrap();
        let x = Variable::scalar("x", normals(n, 3)).unwrap();
        let c = criterion_j(&x, &[s], &y, 5, 4).unwrap();
        assert!(c.relevance <= 0.05 && c.avg_redundancy <= 0.05 && c.avg_complementarity <= 0.05, "{c:?}");
        assert!(c.j.abs() <= 0.1);
    }

    #[test]
    fn planted_dependencies_are_recovered() {
        let t = planted(500);
        let sel = select_features(&t, &SelectionConfig::default()).unwrap();
        let ranked = sel.ranked_names();
        assert!(ranked[0] == "x1" || ranked[0] == "x3", "{ranked:?}");
        let twin = if ranked[0] == "x1" { "x3" } else { "x1" };
        assert!(sel.removed.iter().any(|r| r.name == twin && r.removed_by == ranked[0]));
        let pos = |n: &str| ranked.iter().position(|r| r == n).unwrap();
        assert!(pos("x2") < pos("x4"), "{ranked:?}");
        assert_eq!(ranked.len() + sel.removed.len(), 4);
    }

    #[test]
    fn preselected_twin_is_removed_first() {
        let t = planted(500);
        let cfg = SelectionConfig {
            preselected: vec!["x1".into()],
            ..SelectionConfig::default()
        };
        let sel = select_features(&t, &cfg).unwrap();
        assert_eq!(sel.selected[0].name, "x1");
        assert!(sel.selected[0].preselected && sel.selected[0].score.is_none());
        let r = sel.removed.iter().find(|r| r.name == "x3").unwrap();
        assert_eq!(r.iteration, 0);
        assert!(sel.trace.iterations.iter().all(|it| it.candidates.iter().all(|(n, _)| n != "x3")));
    }

    #[test]
    fn high_threshold_removes_nothing() {
        let t = planted(300);
        let cfg = SelectionConfig {
            threshold: 1.5,
            ..SelectionConfig::default()
        };
        let sel = select_features(&t, &cfg).unwrap();
        assert!(sel.removed.is_empty());
        assert_eq!(sel.selected.len(), 4);
    }

    #[test]
    fn trace_is_consistent() {
        let t = planted(300);
        let cfg = SelectionConfig::default();
        let sel = select_features(&t, &cfg).unwrap();
        let all: BTreeSet<String> = t.feature_names().iter().cloned().collect();
        let mut s = BTreeSet::new();
        let mut r = BTreeSet::new();
        for it in &sel.trace.iterations {
            let best = it.candidates.iter().map(|(_, c)| c.j).fold(f64::NEG_INFINITY, f64::max);
            let w = it.candidates.iter().find(|(n, _)| *n == it.winner).unwrap();
            assert_eq!(w.1.j, best);
            let u: BTreeSet<String> = it.candidates.iter().map(|(n, _)| n.clone()).collect();
            assert!(u.is_disjoint(&s) && u.is_disjoint(&r));
            assert_eq!(u.len() + s.len() + r.len(), all.len());
            s.insert(it.winner.clone());
            r.extend(it.removed.iter().cloned());
        }
        for rem in &sel.removed {
            assert!(rem.normalized_mi >= cfg.threshold);
        }
        assert_eq!(select_features(&t, &cfg).unwrap(), sel);
    }

    #[test]
    fn single_feature_and_bad_inputs() {
        let n = 100;
        let t = table(vec![("a", normals(n, 5))], normals(n, 6));
        let sel = select_features(&t, &SelectionConfig::default()).unwrap();
        assert_eq!(sel.ranked_names(), ["a"]);
        let cfg = SelectionConfig {
            preselected: vec!["zz".into()],
            ..SelectionConfig::default()
        };
        assert!(matches!(select_features(&t, &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn masked_rows_are_dropped_pairwise() {
        let n = 300;
        let a = normals(n, 7);
        let b: Vec<f64> = a.iter().zip(normals(n, 8)).map(|(x, e)| x + 0.3 * e).collect();
        let y: Vec<f64> = a.iter().zip(normals(n, 9)).map(|(x, e)| x + 0.5 * e).collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let ids: Vec<SampleId> = (0..n)
            .map(|i| SampleId {
                source_id: "s".into(),
                cycle: i as u32,
            })
            .collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![a[i], b[i]]).collect();
        let mask: Vec<Vec<bool>> = (0..n).map(|i| vec![true, i % 3 != 0]).collect();
        let masked = FeatureTable::with_mask(names.clone(), ids.clone(), rows.clone(), mask, Some(y.clone())).unwrap();
        let keep: Vec<usize> = (0..n).filter(|i| i % 3 != 0).collect();
        let sub = FeatureTable::new(
            names,
            keep.iter().map(|&i| ids[i].clone()).collect(),
            keep.iter().map(|&i| rows[i].clone()).collect(),
            Some(keep.iter().map(|&i| y[i]).collect()),
        )
        .unwrap();
        let mut c1 = PairCache::new(&masked, 5, 1);
        let mut c2 = PairCache::new(&sub, 5, 1);
        assert_eq!(c1.redundancy(0, 1).unwrap(), c2.redundancy(0, 1).unwrap());
        assert_eq!(c1.relevance(1).unwrap(), c2.relevance(1).unwrap());
        assert!(c1.relevance(0).unwrap() != c2.relevance(0).unwrap());
    }
}
