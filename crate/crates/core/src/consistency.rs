//! Per-feature supports with projection, and a class-conditional density
//! proxy for auditing ε-consistency of adversarial examples.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::embedding::{equal_frequency_bins, Binning};
use crate::error::{Error, Result};
use crate::preprocess::Scaler;
use crate::schema::{check_feasibility, Schema, Task};

/// Admissible values of one feature, in preprocessed units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSupport {
    /// Observed category codes, ascending.
    Codes {
        codes: Vec<f64>,
    },
    /// Raw integers `lo..=hi` mapped through the feature's scaler.
    IntegerGrid {
        lo: i64,
        hi: i64,
        scaler: Scaler,
    },
    Interval {
        lo: f64,
        hi: f64,
    },
}

impl FeatureSupport {
    /// Nearest admissible value. Ties go to the lower candidate.
    pub fn project(&self, v: f64) -> Result<f64> {
        if !v.is_finite() {
            return Err(Error::NonFinite("value to project".into()));
        }
        Ok(match self {
            FeatureSupport::Codes { codes } => {
                let k = codes.partition_point(|&c| c < v);
                match (k.checked_sub(1).map(|i| codes[i]), codes.get(k).copied()) {
                    (Some(a), Some(b)) => {
                        if v - a <= b - v {
                            a
                        } else {
                            b
                        }
                    }
                    (Some(a), None) => a,
                    (None, Some(b)) => b,
                    (None, None) => unreachable!("supports are nonempty"),
                }
            }
            FeatureSupport::IntegerGrid { lo, hi, scaler } => {
                let k = scaler.inverse(v).round().clamp(*lo as f64, *hi as f64);
                scaler.forward(k)
            }
            FeatureSupport::Interval { lo, hi } => v.clamp(*lo, *hi),
        })
    }

    pub fn contains(&self, v: f64) -> bool {
        self.project(v).is_ok_and(|p| p == v)
    }

    /// `(lo, hi)` in preprocessed units.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            FeatureSupport::Codes { codes } => (codes[0], codes[codes.len() - 1]),
            FeatureSupport::IntegerGrid { lo, hi, scaler } => {
                let (a, b) = (scaler.forward(*lo as f64), scaler.forward(*hi as f64));
                (a.min(b), a.max(b))
            }
            FeatureSupport::Interval { lo, hi } => (*lo, *hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supports {
    pub features: Vec<FeatureSupport>,
}

/// Supports from observed data. Every observed row already satisfies the
/// schema constraints, so the observed hull lies inside the declared range.
pub fn fit_supports(data: &Dataset) -> Result<Supports> {
    if data.is_empty() {
        return Err(Error::Data("cannot fit supports on an empty dataset".into()));
    }
    let mut out = Vec::with_capacity(data.dim());
    for (j, f) in data.schema().features().iter().enumerate() {
        let col = data.features().column(j);
        let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        out.push(if f.is_categorical() {
            let mut codes: Vec<f64> = col.to_vec();
            codes.sort_by(f64::total_cmp);
            codes.dedup();
            FeatureSupport::Codes { codes }
        } else if f.is_discrete() {
            let s = data.scaler(j);
            let (a, b) = (s.inverse(lo).round(), s.inverse(hi).round());
            FeatureSupport::IntegerGrid {
                lo: a.min(b) as i64,
                hi: a.max(b) as i64,
                scaler: s,
            }
        } else {
            FeatureSupport::Interval { lo, hi }
        });
    }
    Ok(Supports { features: out })
}

/// Project every coordinate onto its support.
pub fn project(x_star: &[f64], supports: &Supports) -> Result<Vec<f64>> {
    if x_star.len() != supports.features.len() {
        return Err(Error::LengthMismatch {
            expected: supports.features.len(),
            actual: x_star.len(),
        });
    }
    x_star
        .iter()
        .zip(&supports.features)
        .map(|(&v, s)| s.project(v))
        .collect()
}

/// Project only the listed coordinates, in place.
pub fn project_coords(x: &mut [f64], coords: &[usize], supports: &Supports) -> Result<()> {
    for &j in coords {
        x[j] = supports.features[j].project(x[j])?;
    }
    Ok(())
}

/// Indices of coordinates lying outside their support.
pub fn support_violations(x: &[f64], supports: &Supports) -> Vec<usize> {
    x.iter()
        .zip(&supports.features)
        .enumerate()
        .filter(|(_, (&v, s))| !s.contains(v))
        .map(|(j, _)| j)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    /// Per-class training-score percentile used as ε.
    pub percentile: f64,
    /// Weight of the squared Mahalanobis distance.
    pub penalty: f64,
    pub histogram_bins: usize,
    pub ridge: f64,
    /// Laplace pseudo-count on observed categories and histogram bins.
    pub alpha: f64,
    /// Equal-frequency classes used to condition regression targets.
    pub regression_bins: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            percentile: 1.0,
            penalty: 0.5,
            histogram_bins: 20,
            ridge: 1e-6,
            alpha: 1.0,
            regression_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    /// Probability per observed code; other codes have probability 0.
    Discrete { codes: Vec<f64>, probs: Vec<f64> },
    /// Equal-width bins over `[lo, hi]`; values outside fall in the end bins.
    Histogram { lo: f64, hi: f64, probs: Vec<f64> },
}

impl Marginal {
    pub fn log_prob(&self, v: f64) -> f64 {
        match self {
            Marginal::Discrete { codes, probs } => match codes.binary_search_by(|c| c.total_cmp(&v)) {
                Ok(k) => probs[k].ln(),
                Err(_) => f64::NEG_INFINITY,
            },
            Marginal::Histogram { lo, hi, probs } => probs[hist_bin(*lo, *hi, probs.len(), v)].ln(),
        }
    }
}

fn hist_bin(lo: f64, hi: f64, bins: usize, v: f64) -> usize {
    if hi <= lo {
        return 0;
    }
    let b = ((v - lo) / (hi - lo) * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    pub class: i64,
    pub count: usize,
    pub marginals: Vec<Marginal>,
    /// Mean of the standardized numeric block.
    pub mean: Vec<f64>,
    /// Lower Cholesky factor of the regularized covariance, row-major.
    pub cholesky: Vec<Vec<f64>>,
    pub log_epsilon: f64,
}

/// Class-conditional score: `Σ log p̂_i(x_i | y) − penalty · Mahalanobis²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyEstimator {
    pub config: ConsistencyConfig,
    pub task: Task,
    /// Columns in the Mahalanobis block.
    pub numeric: Vec<usize>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    /// Regression targets are conditioned on these equal-frequency bins.
    pub bin_edges: Option<Vec<f64>>,
    pub classes: Vec<ClassModel>,
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Undefined("percentile of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 >= v.len() || frac == 0.0 || v[i] == v[i + 1] {
        return Ok(v[i]);
    }
    Ok(v[i] + frac * (v[i + 1] - v[i]))
}

impl ConsistencyEstimator {
    pub fn fit(train: &Dataset, supports: &Supports, config: &ConsistencyConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot fit the estimator on an empty dataset".into()));
        }
        if config.histogram_bins == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        let schema = train.schema();
        let task = schema.task();
        let numeric: Vec<usize> = (0..schema.dim())
            .filter(|&j| !schema.feature(j).is_categorical())
            .collect();
        let x = train.features();
        let (mut center, mut scale) = (Vec::new(), Vec::new());
        for &j in &numeric {
            let col = x.column(j);
            let m = col.mean().unwrap_or(0.0);
            let sd = col.std(0.0);
            center.push(m);
            scale.push(if sd > 0.0 { sd } else { 1.0 });
        }
        let (labels, bin_edges) = match task {
            Task::BinaryClassification => (train.labels().iter().map(|&y| y as i64).collect::<Vec<_>>(), None),
            Task::Regression => {
                let b = equal_frequency_bins(train.labels(), config.regression_bins)?;
                (b.labels.iter().map(|&l| l as i64).collect(), Some(b.edges))
            }
        };
        let mut by_class: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let mut est = ConsistencyEstimator {
            config: config.clone(),
            task,
            numeric,
            center,
            scale,
            bin_edges,
            classes: Vec::new(),
        };
        for (class, rows) in by_class {
            let model = est.fit_class(train, supports, class, &rows)?;
            est.classes.push(model);
        }
        for c in 0..est.classes.len() {
            let class = est.classes[c].class;
            let rows: Vec<f64> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .map(|(i, _)| est.class_log_score(&est.classes[c], train.row(i).as_slice().expect("standard layout")))
                .collect();
            est.classes[c].log_epsilon = percentile(&rows, config.percentile)?;
        }
        Ok(est)
    }

    fn fit_class(&self, train: &Dataset, supports: &Supports, class: i64, rows: &[usize]) -> Result<ClassModel> {
        let cfg = &self.config;
        let x = train.features();
        let n = rows.len() as f64;
        let mut marginals = Vec::with_capacity(train.dim());
        for (j, f) in train.schema().features().iter().enumerate() {
            if f.is_categorical() {
                let mut counts: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
                for &i in rows {
                    let v = x[[i, j]];
                    counts.entry(v.to_bits()).or_insert((v, 0)).1 += 1;
                }
                let mut pairs: Vec<(f64, usize)> = counts.into_values().collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                let denom = n + cfg.alpha * pairs.len() as f64;
                marginals.push(Marginal::Discrete {
                    codes: pairs.iter().map(|p| p.0).collect(),
                    probs: pairs.iter().map(|p| (p.1 as f64 + cfg.alpha) / denom).collect(),
                });
            } else {
                let (lo, hi) = supports.features[j].bounds();
                let bins = cfg.histogram_bins;
                let mut counts = vec![0.0; bins];
                for &i in rows {
                    counts[hist_bin(lo, hi, bins, x[[i, j]])] += 1.0;
                }
                let denom = n + cfg.alpha * bins as f64;
                marginals.push(Marginal::Histogram {
                    lo,
                    hi,
                    probs: counts.iter().map(|c| (c + cfg.alpha) / denom).collect(),
                });
            }
        }
        let k = self.numeric.len();
        let z: Vec<DVector<f64>> = rows
            .iter()
            .map(|&i| self.standardize(x.row(i).as_slice().expect("standard layout")))
            .collect();
        let mut mean = DVector::zeros(k);
        for v in &z {
            mean += v;
        }
        mean /= n;
        let mut cov = DMatrix::zeros(k, k);
        for v in &z {
            let d = v - &mean;
            cov += &d * d.transpose();
        }
        if rows.len() > 1 {
            cov /= n - 1.0;
        }
        for i in 0..k {
            cov[(i, i)] += cfg.ridge;
        }
        let chol = nalgebra::Cholesky::new(cov)
            .ok_or_else(|| Error::Data(format!("class {class} covariance is not positive definite")))?;
        let l = chol.l();
        Ok(ClassModel {
            class,
            count: rows.len(),
            marginals,
            mean: mean.iter().copied().collect(),
            cholesky: (0..k).map(|r| (0..k).map(|c| l[(r, c)]).collect()).collect(),
            log_epsilon: f64::NEG_INFINITY,
        })
    }

    fn standardize(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.numeric.len(),
            self.numeric
                .iter()
                .enumerate()
                .map(|(k, &j)| (x[j] - self.center[k]) / self.scale[k]),
        )
    }

    /// Squared Mahalanobis distance of the numeric block to the class mean.
    pub fn mahalanobis_sq(&self, class: &ClassModel, x: &[f64]) -> f64 {
        let z = self.standardize(x);
        let k = z.len();
        // Forward substitution L u = z - mean.
        let mut u = vec![0.0; k];
        for r in 0..k {
            let mut s = z[r] - class.mean[r];
            s -= class.cholesky[r][..r].iter().zip(&u).map(|(l, v)| l * v).sum::<f64>();
            u[r] = s / class.cholesky[r][r];
        }
        u.iter().map(|v| v * v).sum()
    }

    fn class_log_score(&self, class: &ClassModel, x: &[f64]) -> f64 {
        let marg: f64 = class.marginals.iter().zip(x).map(|(m, &v)| m.log_prob(v)).sum();
        if marg == f64::NEG_INFINITY {
            return marg;
        }
        marg - self.config.penalty * self.mahalanobis_sq(class, x)
    }

    /// Conditioning class of a label (its bin for regression).
    pub fn class_key(&self, y: f64) -> i64 {
        match &self.bin_edges {
            Some(edges) => Binning::label_of(edges, y) as i64,
            None => y as i64,
        }
    }

    pub fn class_model(&self, y: f64) -> Result<&ClassModel> {
        let key = self.class_key(y);
        self.classes
            .iter()
            .find(|c| c.class == key)
            .ok_or(Error::UnseenClass(key))
    }

    /// Log of the consistency score.
    pub fn log_score(&self, x: &[f64], y: f64) -> Result<f64> {
        if x.len() != self.classes.first().map_or(0, |c| c.marginals.len()) {
            return Err(Error::LengthMismatch {
                expected: self.classes.first().map_or(0, |c| c.marginals.len()),
                actual: x.len(),
            });
        }
        Ok(self.class_log_score(self.class_model(y)?, x))
    }

    /// Monotone proxy for `P(X = x | y)`; zero when a categorical code was
    /// never observed under `y`.
    pub fn consistency_score(&self, x: &[f64], y: f64) -> Result<f64> {
        Ok(self.log_score(x, y)?.exp())
    }

    /// Log of the class's ε.
    pub fn log_epsilon(&self, y: f64) -> Result<f64> {
        Ok(self.class_model(y)?.log_epsilon)
    }

    pub fn is_consistent(&self, x: &[f64], y: f64) -> Result<bool> {
        Ok(is_consistent(self.log_score(x, y)?, self.log_epsilon(y)?))
    }
}

/// `score > ε`, compared in the log domain.
pub fn is_consistent(log_score: f64, log_epsilon: f64) -> bool {
    log_score > log_epsilon
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub feasible: bool,
    pub support_violations: Vec<usize>,
    pub log_score: f64,
    pub log_epsilon: f64,
    pub consistent: bool,
    pub valid: bool,
}

/// Feasibility, support cleanliness and consistency of one output.
pub fn validity_check(
    x: &[f64],
    x_star: &[f64],
    y: f64,
    est: &ConsistencyEstimator,
    supports: &Supports,
    schema: &Schema,
) -> Result<ValidityReport> {
    let feasible = check_feasibility(x, x_star, schema)?;
    let support_violations = support_violations(x_star, supports);
    let log_score = est.log_score(x_star, y)?;
    let log_epsilon = est.log_epsilon(y)?;
    let consistent = is_consistent(log_score, log_epsilon);
    Ok(ValidityReport {
        feasible,
        support_violations,
        log_score,
        log_epsilon,
        consistent,
        valid: feasible && consistent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Scaler;
    use crate::schema::{Constraint, FeatureSpec};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::sync::Arc;

    fn toy() -> Dataset {
        let schema = Arc::new(
            Schema::new(
                Task::BinaryClassification,
                vec![
                    FeatureSpec::categorical("c", ["a", "b", "c", "d"]),
                    FeatureSpec::numeric("k").with_constraints(&[Constraint::Integer]),
                    FeatureSpec::numeric("p").with_constraints(&[Constraint::Positive]),
                    FeatureSpec::numeric("z").with_constraints(&[Constraint::Normalized]),
                ],
            )
            .unwrap(),
        );
        let x = ndarray::array![
            [0.0, 0.0, 0.2, 0.1],
            [1.0, 5.0, 3.0, 0.9],
            [2.0, 2.0, 1.0, 0.5],
            [1.0, 3.0, 0.7, 0.4],
        ];
        Dataset::new(schema, x, vec![0.0, 1.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn support_examples() {
        let s = fit_supports(&toy()).unwrap();
        assert_eq!(
            s.features[0],
            FeatureSupport::Codes {
                codes: vec![0.0, 1.0, 2.0]
            }
        );
        assert_eq!(s.features[2], FeatureSupport::Interval { lo: 0.2, hi: 3.0 });
        let (lo, hi) = s.features[3].bounds();
        assert!(lo >= 0.0 && hi <= 1.0);
        assert_eq!(s.features[1].project(2.6).unwrap(), 3.0);
        assert_eq!(s.features[0].project(1.4).unwrap(), 1.0);
        assert_eq!(s.features[0].project(1.5).unwrap(), 1.0);
        assert_eq!(s.features[0].project(9.0).unwrap(), 2.0);
        assert_eq!(s.features[1].project(-4.0).unwrap(), 0.0);
        assert!(s.features[2].project(f64::NAN).is_err());
        let row = [1.0, 3.0, 0.7, 0.4];
        assert_eq!(project(&row, &s).unwrap(), row.to_vec());
    }

    #[test]
    fn nearest_code_matches_argmin_oracle() {
        let codes = vec![0.0, 2.0, 3.0, 7.0];
        let s = FeatureSupport::Codes { codes: codes.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let v: f64 = rng.random_range(-3.0..10.0);
            let oracle = codes
                .iter()
                .copied()
                .min_by(|a, b| (a - v).abs().total_cmp(&(b - v).abs()).then(a.total_cmp(b)))
                .unwrap();
            assert_eq!(s.project(v).unwrap(), oracle);
        }
    }

    #[test]
    fn scaled_integer_grid_is_exact() {
        let s = FeatureSupport::IntegerGrid {
            lo: 3,
            hi: 40,
            scaler: Scaler::MinMax { lo: 3.0, hi: 40.0 },
        };
        for k in 3..=40 {
            let v = (k as f64 - 3.0) / 37.0;
            assert!(s.contains(v), "k={k}");
        }
        assert_eq!(s.project(0.5).unwrap(), (22.0 - 3.0) / 37.0);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(v in proptest::collection::vec(-5.0f64..10.0, 4)) {
            let s = fit_supports(&toy()).unwrap();
            let p = project(&v, &s).unwrap();
            prop_assert_eq!(project(&p, &s).unwrap(), p.clone());
            prop_assert!(support_violations(&p, &s).is_empty());
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (1..=101).map(f64::from).collect();
        assert_eq!(percentile(&v, 1.0).unwrap(), 2.0);
        assert_eq!(percentile(&[1.0, 2.0], 50.0).unwrap(), 1.5);
    }

    /// Unimodal two-class data: one categorical with a clear mode, three
    /// correlated numerics.
    fn unimodal(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 1.0).unwrap();
        let mut flat = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = (i % 2) as f64;
            let u: f64 = rng.random();
            let code = if u < 0.6 {
                c
            } else if u < 0.85 {
                2.0
            } else {
                3.0
            };
            let a = g.sample(&mut rng) + 2.0 * c;
            let b = a + 0.3 * g.sample(&mut rng);
            let d = g.sample(&mut rng);
            flat.extend([code, a, b, d]);
            y.push(c);
        }
        let schema = Arc::new(
            Schema::new(
                Task::BinaryClassification,
                vec![
                    FeatureSpec::categorical("c", ["a", "b", "c", "d", "never"]),
                    FeatureSpec::numeric("a"),
                    FeatureSpec::numeric("b"),
                    FeatureSpec::numeric("d"),
                ],
            )
            .unwrap(),
        );
        Dataset::new(schema, Array2::from_shape_vec((n, 4), flat).unwrap(), y).unwrap()
    }

    fn fitted() -> (Dataset, Supports, ConsistencyEstimator) {
        let ds = unimodal(2000, 4);
        let s = fit_supports(&ds).unwrap();
        let e = ConsistencyEstimator::fit(&ds, &s, &ConsistencyConfig::default()).unwrap();
        (ds, s, e)
    }

    #[test]
    fn unobserved_code_scores_zero() {
        let (_, _, e) = fitted();
        // Code 1 never occurs under class 0.
        let x = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(e.consistency_score(&x, 0.0).unwrap(), 0.0);
        assert!(!e.is_consistent(&x, 0.0).unwrap());
        assert!(matches!(e.log_score(&x, 7.0), Err(Error::UnseenClass(7))));
    }

    #[test]
    fn centroid_ranks_high_and_anomalous_pair_ranks_low() {
        let (ds, _, e) = fitted();
        let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == 1.0).collect();
        let scores: Vec<f64> = rows
            .iter()
            .map(|&i| e.log_score(ds.row(i).as_slice().unwrap(), 1.0).unwrap())
            .collect();
        let mean = |j: usize| rows.iter().map(|&i| ds.features()[[i, j]]).sum::<f64>() / rows.len() as f64;
        let centroid = [1.0, mean(1), mean(2), mean(3)];
        let p90 = percentile(&scores, 90.0).unwrap();
        assert!(e.log_score(&centroid, 1.0).unwrap() > p90);
        // Marginally typical values, but b far below a breaks their coupling.
        let odd = [1.0, mean(1) + 1.0, mean(2) - 1.0, mean(3)];
        let p5 = percentile(&scores, 5.0).unwrap();
        assert!(e.log_score(&odd, 1.0).unwrap() < p5);
    }

    #[test]
    fn rarer_category_never_raises_score() {
        let (ds, _, e) = fitted();
        for i in 0..200 {
            let s = ds.sample(i);
            if s.x[0] != s.y {
                continue;
            }
            let base = e.log_score(&s.x, s.y).unwrap();
            for rare in [2.0, 3.0] {
                let mut x = s.x.clone();
                x[0] = rare;
                assert!(e.log_score(&x, s.y).unwrap() <= base);
            }
        }
    }

    #[test]
    fn training_rows_mostly_consistent_and_report_conjunction() {
        let (ds, s, e) = fitted();
        let pass = ds.samples().filter(|r| e.is_consistent(&r.x, r.y).unwrap()).count();
        assert!(pass as f64 / ds.len() as f64 >= 0.98);
        let r = ds.sample(0);
        let rep = validity_check(&r.x, &r.x, r.y, &e, &s, ds.schema()).unwrap();
        assert!(rep.feasible && rep.support_violations.is_empty());
        assert_eq!(rep.valid, rep.consistent);
        let json = serde_json::to_string(&e).unwrap();
        let back: ConsistencyEstimator = serde_json::from_str(&json).unwrap();
        assert_eq!(back.log_score(&r.x, r.y).unwrap(), e.log_score(&r.x, r.y).unwrap());
    }

    #[test]
    fn immutable_change_is_invalid() {
        let base = unimodal(400, 1);
        let mut specs = base.schema().features().to_vec();
        specs[1] = specs[1].clone().immutable(true);
        let schema = Arc::new(Schema::new(Task::BinaryClassification, specs).unwrap());
        let ds = Dataset::new(schema.clone(), base.features().clone(), base.labels().to_vec()).unwrap();
        let s = fit_supports(&ds).unwrap();
        let e = ConsistencyEstimator::fit(&ds, &s, &ConsistencyConfig::default()).unwrap();
        let r = ds.sample(3);
        let mut xs = r.x.clone();
        xs[1] = ds.sample(5).x[1];
        let rep = validity_check(&r.x, &xs, r.y, &e, &s, &schema).unwrap();
        assert!(!rep.feasible && !rep.valid);
    }
}
