//! Perturbation metrics, success summaries, transfer rates and ℓ0
//! histograms over attack results.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::{attack_succeeds, AttackResult};
use crate::error::{Error, Result};
use crate::schema::{Constraint, Schema};
use crate::trees::TreeModel;

/// Continuous coordinates closer than this count as unchanged.
pub const CONTINUOUS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationMetrics {
    pub l0_categorical: usize,
    pub l0_numeric: usize,
    pub l0_total: usize,
    pub l0_pct_categorical: f64,
    pub l0_pct_numeric: f64,
    pub l0_pct_total: f64,
    /// Sum of `|δ_i|` over numeric coordinates, preprocessed units.
    pub l1_numeric: f64,
}

/// `count / of * 100`, or 0 when there is nothing to count.
pub fn pct(count: f64, of: usize) -> f64 {
    if of == 0 {
        0.0
    } else {
        count / of as f64 * 100.0
    }
}

pub fn changed(schema: &Schema, j: usize, a: f64, b: f64) -> bool {
    let f = schema.feature(j);
    if f.is_categorical() || f.has(Constraint::Integer) {
        a != b
    } else {
        (a - b).abs() > CONTINUOUS_TOLERANCE
    }
}

pub fn perturbation_metrics(x: &[f64], x_star: &[f64], schema: &Schema) -> Result<PerturbationMetrics> {
    if x.len() != schema.dim() || x_star.len() != schema.dim() {
        return Err(Error::LengthMismatch {
            expected: schema.dim(),
            actual: if x.len() != schema.dim() { x.len() } else { x_star.len() },
        });
    }
    let (mut cat, mut num, mut l1) = (0, 0, 0.0);
    for j in 0..schema.dim() {
        let categorical = schema.feature(j).is_categorical();
        if !categorical {
            l1 += (x_star[j] - x[j]).abs();
        }
        if changed(schema, j, x[j], x_star[j]) {
            if categorical {
                cat += 1;
            } else {
                num += 1;
            }
        }
    }
    Ok(PerturbationMetrics {
        l0_categorical: cat,
        l0_numeric: num,
        l0_total: cat + num,
        l0_pct_categorical: pct(cat as f64, schema.categorical_count()),
        l0_pct_numeric: pct(num as f64, schema.numeric_count()),
        l0_pct_total: pct((cat + num) as f64, schema.dim()),
        l1_numeric: l1,
    })
}

/// Averages over successful results; the success rate is over all results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub attempted: usize,
    pub succeeded: usize,
    pub success_pct: f64,
    pub l0_categorical: Option<f64>,
    pub l0_categorical_pct: Option<f64>,
    pub l1_numeric: Option<f64>,
    pub l0_numeric: Option<f64>,
    pub l0_numeric_pct: Option<f64>,
    pub l0_total: Option<f64>,
    pub l0_total_pct: Option<f64>,
}

pub fn attack_summary(dataset: &str, results: &[AttackResult], schema: &Schema) -> Result<SummaryRow> {
    let metrics: Vec<PerturbationMetrics> = results
        .iter()
        .filter(|r| r.succeeded)
        .map(|r| perturbation_metrics(&r.x, &r.x_star, schema))
        .collect::<Result<_>>()?;
    summarize(
        dataset,
        results.len(),
        &metrics,
        schema.categorical_count(),
        schema.numeric_count(),
    )
}

/// Summary from per-result metrics of the successful results; percentages
/// use the given feature-type counts.
pub fn summarize(
    dataset: &str,
    attempted: usize,
    successes: &[PerturbationMetrics],
    n_categorical: usize,
    n_numeric: usize,
) -> Result<SummaryRow> {
    if attempted == 0 {
        return Err(Error::Data("no attack results to summarize".into()));
    }
    let k = successes.len();
    let mean = |f: &dyn Fn(&PerturbationMetrics) -> f64| -> Option<f64> {
        (k > 0).then(|| successes.iter().map(f).sum::<f64>() / k as f64)
    };
    let cat = mean(&|m| m.l0_categorical as f64);
    let num = mean(&|m| m.l0_numeric as f64);
    let total = mean(&|m| m.l0_total as f64);
    Ok(SummaryRow {
        dataset: dataset.to_string(),
        attempted,
        succeeded: k,
        success_pct: pct(k as f64, attempted),
        l0_categorical: cat,
        l0_categorical_pct: cat.map(|c| pct(c, n_categorical)),
        l1_numeric: mean(&|m| m.l1_numeric),
        l0_numeric: num,
        l0_numeric_pct: num.map(|c| pct(c, n_numeric)),
        l0_total: total,
        l0_total_pct: total.map(|c| pct(c, n_categorical + n_numeric)),
    })
}

/// Percentage of surrogate-successful outputs that also fool `target`.
pub fn transfer_rate(results: &[AttackResult], target: &TreeModel, tau: f64) -> Result<f64> {
    let wins: Vec<&AttackResult> = results.iter().filter(|r| r.succeeded).collect();
    if wins.is_empty() {
        return Err(Error::Undefined(
            "no successful adversarial examples to transfer".into(),
        ));
    }
    let mut fooled = 0usize;
    for r in &wins {
        if attack_succeeds(target.task, target.predict_score(&r.x_star)?, r.y, tau) {
            fooled += 1;
        }
    }
    Ok(pct(fooled as f64, wins.len()))
}

/// Counts of total ℓ0 over successful results, bin width 1.
pub fn l0_histogram(results: &[AttackResult], schema: &Schema) -> Result<BTreeMap<usize, usize>> {
    let mut h = BTreeMap::new();
    for r in results.iter().filter(|r| r.succeeded) {
        *h.entry(perturbation_metrics(&r.x, &r.x_star, schema)?.l0_total)
            .or_insert(0) += 1;
    }
    Ok(h)
}

/// Median and mean of the histogram's underlying values.
pub fn histogram_median_mean(h: &BTreeMap<usize, usize>) -> Option<(f64, f64)> {
    let n: usize = h.values().sum();
    if n == 0 {
        return None;
    }
    let mut values = Vec::with_capacity(n);
    for (&v, &c) in h {
        values.extend(std::iter::repeat_n(v as f64, c));
    }
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    };
    Some((median, values.iter().sum::<f64>() / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{FeatureSpec, Task};
    use proptest::prelude::*;

    /// 21 categorical + 31 numeric features, credit-style width.
    fn wide() -> Schema {
        let mut f: Vec<FeatureSpec> = (0..21)
            .map(|j| FeatureSpec::categorical(format!("c{j}"), ["a", "b"]))
            .collect();
        f.extend((0..31).map(|j| FeatureSpec::numeric(format!("n{j}"))));
        Schema::new(Task::BinaryClassification, f).unwrap()
    }

    fn result(x: Vec<f64>, x_star: Vec<f64>, succeeded: bool) -> AttackResult {
        AttackResult {
            x,
            y: 0.0,
            x_star,
            selected: vec![],
            succeeded,
            iterations: 0,
            score_before: 0.0,
            score_after: 0.0,
            trace: vec![],
            aborted: None,
            validity: None,
        }
    }

    #[test]
    fn published_percentages() {
        assert_eq!(format!("{:.2}", pct(2.27, 52)), "4.37");
        assert_eq!(format!("{:.2}", pct(1.60, 21)), "7.62");
        let s = wide();
        let m = perturbation_metrics(&[0.0; 52], &[0.0; 52], &s).unwrap();
        assert_eq!((m.l0_total, m.l1_numeric, m.l0_pct_total), (0, 0.0, 0.0));
    }

    #[test]
    fn summary_success_rate_and_identical_results() {
        let s = wide();
        let mut x_star = vec![0.0; 52];
        x_star[0] = 1.0;
        x_star[30] = 0.25;
        let mut results: Vec<AttackResult> = (0..499).map(|_| result(vec![0.0; 52], x_star.clone(), true)).collect();
        results.push(result(vec![0.0; 52], vec![0.0; 52], false));
        let row = attack_summary("toy", &results, &s).unwrap();
        assert_eq!(format!("{:.2}", row.success_pct), "99.80");
        let single = perturbation_metrics(&[0.0; 52], &x_star, &s).unwrap();
        assert_eq!(row.l0_total, Some(single.l0_total as f64));
        assert_eq!(row.l1_numeric, Some(single.l1_numeric));
        let none = attack_summary("toy", &results[499..], &s).unwrap();
        assert_eq!((none.success_pct, none.l0_total), (0.0, None));
        assert!(attack_summary("toy", &[], &s).is_err());
    }

    #[test]
    fn histogram_examples() {
        let s = wide();
        let mut one = vec![0.0; 52];
        one[40] = 0.5;
        let rs: Vec<AttackResult> = (0..5).map(|_| result(vec![0.0; 52], one.clone(), true)).collect();
        let h = l0_histogram(&rs, &s).unwrap();
        assert_eq!(h.into_iter().collect::<Vec<_>>(), vec![(1, 5)]);
        assert!(l0_histogram(&[], &s).unwrap().is_empty());
        let mut skew = BTreeMap::new();
        skew.insert(1, 6);
        skew.insert(2, 3);
        skew.insert(7, 1);
        let (median, mean) = histogram_median_mean(&skew).unwrap();
        assert_eq!(median, 1.0);
        assert!(mean > median);
    }

    #[test]
    fn tolerance_only_for_continuous() {
        let s = Schema::new(
            Task::BinaryClassification,
            vec![
                FeatureSpec::numeric("k").with_constraints(&[Constraint::Integer]),
                FeatureSpec::numeric("v"),
            ],
        )
        .unwrap();
        let m = perturbation_metrics(&[0.0, 0.0], &[1e-12, 1e-12], &s).unwrap();
        assert_eq!((m.l0_numeric, m.l0_total), (1, 1));
    }

    proptest! {
        #[test]
        fn decomposition_identity(deltas in proptest::collection::vec(-1.0f64..1.0, 52), mask in proptest::collection::vec(proptest::bool::ANY, 52)) {
            let s = wide();
            let x = vec![0.0; 52];
            let x_star: Vec<f64> = deltas.iter().zip(&mask).enumerate().map(|(j, (d, &m))| {
                if !m { 0.0 } else if j < 21 { 1.0 } else { *d }
            }).collect();
            let m = perturbation_metrics(&x, &x_star, &s).unwrap();
            prop_assert_eq!(m.l0_categorical + m.l0_numeric, m.l0_total);
            prop_assert!((m.l0_pct_total - 100.0 * m.l0_total as f64 / 52.0).abs() < 0.01);
            prop_assert!((m.l0_pct_categorical - 100.0 * m.l0_categorical as f64 / 21.0).abs() < 0.01);
            prop_assert!(m.l1_numeric >= 0.0);
        }
    }
}
