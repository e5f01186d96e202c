//! Seeded synthetic heterogeneous tables with low-rank latent structure.
//!
//! Every feature is driven by `u_j = ρ·(a_j·z)/‖a_j‖ + sqrt(1 − ρ²)·ε_j` with a
//! shared latent `z`. Numeric features are monotone transforms of `u_j` that
//! realize their constraint; categorical features bucket `u_j` by rank. The
//! label is a logistic (or linear) function of the `u_j`, immutable features
//! included.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::sigmoid;
use crate::error::{Error, Result};
use crate::preprocess::RawTable;
use crate::schema::{Constraint, FeatureSpec, Schema, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericKind {
    Continuous,
    Integer,
    Positive,
    Negative,
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub task: Task,
    pub n_samples: usize,
    /// One cardinality per categorical feature.
    pub cardinalities: Vec<usize>,
    pub numeric: Vec<NumericKind>,
    pub n_immutable: usize,
    /// Scale of the label signal; 0 gives labels independent of features.
    pub separation: f64,
    pub latent_rank: usize,
    /// Loading of each feature on the shared latent factors.
    pub correlation: f64,
    /// Residual noise sd of regression targets.
    pub noise: f64,
    pub missing_rate: f64,
    /// Append `pair_lo <= pair_hi` columns whose label signal runs through `pair_lo`.
    pub monotone_pair: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::reference(0)
    }
}

impl SynthSpec {
    /// 20 features (8 categorical, 12 numeric, 5 immutable), 12 000 rows.
    pub fn reference(seed: u64) -> Self {
        use NumericKind::*;
        SynthSpec {
            task: Task::BinaryClassification,
            n_samples: 12_000,
            cardinalities: vec![2, 3, 3, 4, 5, 6, 8, 12],
            numeric: vec![
                Continuous, Continuous, Continuous, Continuous, Integer, Integer, Integer, Positive, Positive,
                Negative, Normalized, Normalized,
            ],
            n_immutable: 5,
            separation: 4.0,
            latent_rank: 2,
            correlation: 0.6,
            noise: 0.3,
            missing_rate: 0.0,
            monotone_pair: false,
            seed,
        }
    }

    /// Regression counterpart of the reference task.
    pub fn regression(seed: u64) -> Self {
        SynthSpec {
            task: Task::Regression,
            n_samples: 4_000,
            separation: 1.5,
            ..Self::reference(seed)
        }
    }

    /// Small table with a constructed `pair_lo <= pair_hi` relation.
    pub fn monotone_pair(seed: u64) -> Self {
        use NumericKind::*;
        SynthSpec {
            n_samples: 6_000,
            cardinalities: vec![3, 4],
            numeric: vec![Continuous, Continuous, Integer],
            n_immutable: 2,
            separation: 1.0,
            monotone_pair: true,
            ..Self::reference(seed)
        }
    }

    pub fn feature_count(&self) -> usize {
        self.cardinalities.len() + self.numeric.len() + if self.monotone_pair { 2 } else { 0 }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.feature_count() == 0 {
            return Err(Error::Config("synthetic spec needs rows and features".into()));
        }
        if self.n_immutable > self.cardinalities.len() + self.numeric.len() {
            return Err(Error::Config("more immutable features than base features".into()));
        }
        if self.cardinalities.iter().any(|&k| k < 2) {
            return Err(Error::Config("categorical cardinality must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.correlation) || self.latent_rank == 0 {
            return Err(Error::Config(
                "correlation must lie in [0, 1) with a positive latent rank".into(),
            ));
        }
        if !(0.0..0.75).contains(&self.missing_rate) {
            return Err(Error::Config("missing rate must lie in [0, 0.75)".into()));
        }
        Ok(())
    }
}

/// Raw table plus its schema manifest.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub table: RawTable,
    pub schema: Schema,
}

impl SynthOutput {
    /// Write `data.csv` and `schema.json` into `dir`.
    pub fn write(&self, dir: &Path, comment: Option<&str>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let data = dir.join("data.csv");
        std::fs::write(&data, self.table.to_csv(comment)?).map_err(|e| Error::io(&data, e))?;
        let schema = dir.join("schema.json");
        std::fs::write(&schema, self.schema.to_manifest()?).map_err(|e| Error::io(&schema, e))
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Rank-based bucket boundaries for category frequencies drawn at random.
fn category_of(rank: usize, n: usize, cum: &[f64]) -> usize {
    let q = (rank as f64 + 0.5) / n as f64;
    cum.iter().position(|&c| q < c).unwrap_or(cum.len() - 1)
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_samples;
    let n_cat = spec.cardinalities.len();
    let base = n_cat + spec.numeric.len();
    let rho = spec.correlation;

    let loadings: Vec<Vec<f64>> = (0..base)
        .map(|_| {
            let a: Vec<f64> = (0..spec.latent_rank).map(|_| normal(&mut rng)).collect();
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            a.into_iter().map(|v| v / norm).collect()
        })
        .collect();
    // Label weights are bounded away from zero so every feature, immutable
    // ones included, carries signal.
    let weights: Vec<f64> = (0..base)
        .map(|_| {
            let w: f64 = normal(&mut rng);
            w.signum() * w.abs().max(0.4)
        })
        .collect();
    let wnorm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    let scales: Vec<(f64, f64)> = (0..spec.numeric.len())
        .map(|_| (rng.random_range(1.0..50.0), rng.random_range(-20.0..80.0)))
        .collect();
    let cat_cum: Vec<Vec<f64>> = spec
        .cardinalities
        .iter()
        .map(|&k| {
            let p: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..1.0)).collect();
            let s: f64 = p.iter().sum();
            p.iter()
                .scan(0.0, |acc, v| {
                    *acc += v / s;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    let mut immutable = sample(&mut rng, base, spec.n_immutable).into_vec();
    immutable.sort_unstable();

    let mut u = vec![vec![0.0; base]; n];
    for row in u.iter_mut() {
        let z: Vec<f64> = (0..spec.latent_rank).map(|_| normal(&mut rng)).collect();
        for (j, v) in row.iter_mut().enumerate() {
            let common: f64 = loadings[j].iter().zip(&z).map(|(a, b)| a * b).sum();
            *v = rho * common + (1.0 - rho * rho).sqrt() * normal(&mut rng);
        }
    }
    let pair: Vec<(f64, f64)> = if spec.monotone_pair {
        (0..n)
            .map(|_| {
                let lo = 30.0 + 10.0 * normal(&mut rng);
                let gap = (20.0 + 4.0 * normal(&mut rng)).max(0.5);
                (lo, lo + gap)
            })
            .collect()
    } else {
        Vec::new()
    };

    // Categories keep only the rank bucket of u_j, so the label sees the
    // bucket mean; otherwise the label would depend on unobservable detail.
    let mut codes = vec![vec![0usize; n]; n_cat];
    for (c, &k) in spec.cardinalities.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| u[a][c].total_cmp(&u[b][c]).then(a.cmp(&b)));
        for (rank, &i) in order.iter().enumerate() {
            codes[c][i] = category_of(rank, n, &cat_cum[c]);
        }
        let mut sums = vec![(0.0, 0usize); k];
        for i in 0..n {
            sums[codes[c][i]].0 += u[i][c];
            sums[codes[c][i]].1 += 1;
        }
        for i in 0..n {
            let (t, m) = sums[codes[c][i]];
            u[i][c] = t / m.max(1) as f64;
        }
    }

    let mut labels = Vec::with_capacity(n);
    for (i, row) in u.iter().enumerate() {
        let mut s: f64 = row.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>() / wnorm;
        if spec.monotone_pair {
            // Earlier `pair_lo` pushes toward class 0.
            s = 0.5 * s + 2.5 * (pair[i].0 - 35.0) / 10.0;
        }
        let score = spec.separation * s;
        labels.push(match spec.task {
            Task::BinaryClassification => f64::from(u8::from(rng.random::<f64>() < sigmoid(score))),
            Task::Regression => score + spec.noise * normal(&mut rng),
        });
    }

    let mut features = Vec::with_capacity(spec.feature_count());
    let mut columns: Vec<Vec<String>> = Vec::with_capacity(spec.feature_count());
    for (c, &k) in spec.cardinalities.iter().enumerate() {
        let cats: Vec<String> = (0..k).map(|v| format!("v{v}")).collect();
        features.push(FeatureSpec::categorical(format!("cat{c}"), cats.clone()).immutable(immutable.contains(&c)));
        columns.push(codes[c].iter().map(|&v| cats[v].clone()).collect());
    }
    for (k, kind) in spec.numeric.iter().enumerate() {
        let j = n_cat + k;
        let (scale, offset) = scales[k];
        let (spec_f, f): (FeatureSpec, Box<dyn Fn(f64) -> String>) = match kind {
            NumericKind::Continuous => (
                FeatureSpec::numeric(format!("num{k}")),
                Box::new(move |v| format!("{}", offset + scale * v)),
            ),
            NumericKind::Integer => (
                FeatureSpec::numeric(format!("int{k}")).with_constraints(&[Constraint::Integer]),
                Box::new(move |v| format!("{}", (offset / 4.0 + (scale / 8.0).max(1.0) * v).round())),
            ),
            NumericKind::Positive => (
                FeatureSpec::numeric(format!("pos{k}")).with_constraints(&[Constraint::Positive]),
                Box::new(move |v| format!("{}", scale * (0.6 * v).exp())),
            ),
            NumericKind::Negative => (
                FeatureSpec::numeric(format!("neg{k}")).with_constraints(&[Constraint::Negative]),
                Box::new(move |v| format!("{}", -scale * (0.6 * v).exp())),
            ),
            NumericKind::Normalized => (
                FeatureSpec::numeric(format!("norm{k}")).with_constraints(&[Constraint::Normalized]),
                Box::new(|v| format!("{}", sigmoid(1.5 * v))),
            ),
        };
        features.push(spec_f.immutable(immutable.contains(&j)));
        columns.push(u.iter().map(|r| f(r[j])).collect());
    }
    if spec.monotone_pair {
        features.push(FeatureSpec::numeric("pair_lo"));
        features.push(FeatureSpec::numeric("pair_hi"));
        columns.push(pair.iter().map(|p| format!("{}", p.0)).collect());
        columns.push(pair.iter().map(|p| format!("{}", p.1)).collect());
    }

    let mut headers: Vec<String> = features.iter().map(|f| f.name.clone()).collect();
    headers.push("target".into());
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut r: Vec<Option<String>> = Vec::with_capacity(headers.len());
        for col in &columns {
            let missing = spec.missing_rate > 0.0 && rng.random::<f64>() < spec.missing_rate;
            r.push((!missing).then(|| col[i].clone()));
        }
        r.push(Some(format!("{}", labels[i])));
        rows.push(r);
    }
    Ok(SynthOutput {
        table: RawTable { headers, rows },
        schema: Schema::new(spec.task, features)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::parse_schema;

    #[test]
    fn reference_shape_and_manifest() {
        let out = synth_generate(&SynthSpec {
            n_samples: 500,
            ..SynthSpec::reference(1)
        })
        .unwrap();
        let s = parse_schema(&out.schema.to_manifest().unwrap()).unwrap();
        assert_eq!((s.dim(), s.categorical_count(), s.numeric_count()), (20, 8, 12));
        assert_eq!(s.immutable_set().len(), 5);
        assert_eq!(out.table.rows.len(), 500);
        assert_eq!(out.table.headers.last().unwrap(), "target");
    }

    #[test]
    fn constraints_are_realized_and_seeded() {
        let spec = SynthSpec {
            n_samples: 2000,
            ..SynthSpec::reference(2)
        };
        let out = synth_generate(&spec).unwrap();
        for (j, f) in out.schema.features().iter().enumerate() {
            for r in &out.table.rows {
                let cell = r[j].as_deref().unwrap();
                if f.is_categorical() {
                    assert!(f.categories.iter().any(|c| c == cell));
                } else {
                    assert!(f.admits_raw(cell.parse().unwrap()), "{} = {cell}", f.name);
                }
            }
        }
        let again = synth_generate(&spec).unwrap();
        assert_eq!(again.table, out.table);
        assert_ne!(synth_generate(&SynthSpec { seed: 3, ..spec }).unwrap().table, out.table);
    }

    #[test]
    fn pair_is_ordered_and_correlated() {
        let out = synth_generate(&SynthSpec::monotone_pair(4)).unwrap();
        let lo = out.schema.index_of("pair_lo").unwrap();
        let hi = out.schema.index_of("pair_hi").unwrap();
        let col = |j: usize| -> Vec<f64> {
            out.table
                .rows
                .iter()
                .map(|r| r[j].as_deref().unwrap().parse().unwrap())
                .collect()
        };
        let (a, b) = (col(lo), col(hi));
        assert!(a.iter().zip(&b).all(|(x, y)| x <= y));
        let r = crate::preprocess::pearson_observed(
            &a.iter().map(|&v| Some(v)).collect::<Vec<_>>(),
            &b.iter().map(|&v| Some(v)).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(r > 0.85 && r < 0.95, "r = {r}");
        assert!(!out.schema.is_immutable(lo) && !out.schema.is_immutable(hi));
    }

    #[test]
    fn rejects_contradictions() {
        assert!(synth_generate(&SynthSpec {
            n_immutable: 30,
            ..SynthSpec::reference(0)
        })
        .is_err());
        assert!(synth_generate(&SynthSpec {
            cardinalities: vec![1],
            ..SynthSpec::reference(0)
        })
        .is_err());
    }
}
