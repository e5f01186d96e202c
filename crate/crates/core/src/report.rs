//! Per-sample result records and the report bundle aggregated from them.
//!
//! The bundle (`summary.csv`, `transfer.csv`, `l0_hist.json`,
//! `validity.csv`) is always rebuilt from the per-sample records, so every
//! reported number can be recomputed from `results.csv` alone.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{attack_succeeds, AttackResult};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{histogram_median_mean, pct, perturbation_metrics, summarize, PerturbationMetrics, SummaryRow};
use crate::trees::{TreeKind, TreeModel};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TRANSFER_FILE: &str = "transfer.csv";
pub const HISTOGRAM_FILE: &str = "l0_hist.json";
pub const VALIDITY_FILE: &str = "validity.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Gradient,
    Importance,
}

/// One attack output, flattened for CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub dataset: String,
    pub mode: Mode,
    /// Target whose importance ranked the features; empty in gradient mode.
    pub ranking: String,
    pub sample: usize,
    pub y: f64,
    pub succeeded: bool,
    pub iterations: usize,
    pub score_before: f64,
    pub score_after: f64,
    pub n_categorical: usize,
    pub n_numeric: usize,
    pub l0_categorical: usize,
    pub l0_numeric: usize,
    pub l0_total: usize,
    pub l1_numeric: f64,
    /// ℓ1 over numeric features after inverse scaling.
    pub l1_numeric_raw: f64,
    /// Selected features in selection order, `;`-separated.
    pub selected: String,
    pub feasible: bool,
    pub support_clean: bool,
    pub log_score: Option<f64>,
    pub log_epsilon: Option<f64>,
    pub consistent: Option<bool>,
    /// Whether the target also meets the exit condition; only for successes.
    pub fooled_dt: Option<bool>,
    pub fooled_rf: Option<bool>,
    pub fooled_gbm: Option<bool>,
    pub aborted: Option<String>,
}

impl ResultRecord {
    pub fn fooled(&self, kind: TreeKind) -> Option<bool> {
        match kind {
            TreeKind::DecisionTree => self.fooled_dt,
            TreeKind::RandomForest => self.fooled_rf,
            TreeKind::Gbm => self.fooled_gbm,
        }
    }

    fn set_fooled(&mut self, kind: TreeKind, v: bool) {
        let slot = match kind {
            TreeKind::DecisionTree => &mut self.fooled_dt,
            TreeKind::RandomForest => &mut self.fooled_rf,
            TreeKind::Gbm => &mut self.fooled_gbm,
        };
        *slot = Some(v);
    }

    fn metrics(&self) -> PerturbationMetrics {
        PerturbationMetrics {
            l0_categorical: self.l0_categorical,
            l0_numeric: self.l0_numeric,
            l0_total: self.l0_total,
            l0_pct_categorical: pct(self.l0_categorical as f64, self.n_categorical),
            l0_pct_numeric: pct(self.l0_numeric as f64, self.n_numeric),
            l0_pct_total: pct(self.l0_total as f64, self.n_categorical + self.n_numeric),
            l1_numeric: self.l1_numeric,
        }
    }
}

/// Which results are being recorded and which targets to evaluate them on.
#[derive(Debug, Clone, Copy)]
pub struct RecordContext<'a> {
    pub dataset: &'a str,
    pub mode: Mode,
    pub ranking: Option<TreeKind>,
    /// The attacked rows; supplies schema and scalers.
    pub data: &'a Dataset,
    pub targets: &'a [TreeModel],
    pub tau: f64,
}

pub fn records(ctx: &RecordContext, results: &[AttackResult]) -> Result<Vec<ResultRecord>> {
    let schema = ctx.data.schema();
    let mut out = Vec::with_capacity(results.len());
    for (i, r) in results.iter().enumerate() {
        let m = perturbation_metrics(&r.x, &r.x_star, schema)?;
        let l1_raw = (0..schema.dim())
            .filter(|&j| !schema.feature(j).is_categorical())
            .map(|j| {
                let s = ctx.data.scaler(j);
                (s.inverse(r.x_star[j]) - s.inverse(r.x[j])).abs()
            })
            .sum();
        let v = r.validity.as_ref();
        let mut rec = ResultRecord {
            dataset: ctx.dataset.to_string(),
            mode: ctx.mode,
            ranking: ctx.ranking.map(|k| k.short_name().to_string()).unwrap_or_default(),
            sample: i,
            y: r.y,
            succeeded: r.succeeded,
            iterations: r.iterations,
            score_before: r.score_before,
            score_after: r.score_after,
            n_categorical: schema.categorical_count(),
            n_numeric: schema.numeric_count(),
            l0_categorical: m.l0_categorical,
            l0_numeric: m.l0_numeric,
            l0_total: m.l0_total,
            l1_numeric: m.l1_numeric,
            l1_numeric_raw: l1_raw,
            selected: r.selected.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(";"),
            feasible: crate::schema::check_feasibility(&r.x, &r.x_star, schema)?,
            support_clean: v.is_none_or(|v| v.support_violations.is_empty()),
            log_score: v.map(|v| v.log_score),
            log_epsilon: v.map(|v| v.log_epsilon),
            consistent: v.map(|v| v.consistent),
            fooled_dt: None,
            fooled_rf: None,
            fooled_gbm: None,
            aborted: r.aborted.clone(),
        };
        if r.succeeded {
            for t in ctx.targets {
                if ctx.ranking.is_none_or(|k| k == t.kind) {
                    rec.set_fooled(
                        t.kind,
                        attack_succeeds(t.task, t.predict_score(&r.x_star)?, r.y, ctx.tau),
                    );
                }
            }
        }
        out.push(rec);
    }
    Ok(out)
}

fn header_line(config_hash: &str) -> String {
    format!("# config_hash={config_hash}\n")
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], config_hash: &str) -> Result<()> {
    let mut out = header_line(config_hash).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_records(path: &Path, records: &[ResultRecord], config_hash: &str) -> Result<()> {
    write_csv(path, records, config_hash)
}

pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// The `config_hash` recorded in a file's first line, if any.
pub fn read_config_hash(path: &Path) -> Result<Option<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .map(str::to_string))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub dataset: String,
    pub model: String,
    pub base_pct: Option<f64>,
    pub adjusted_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityRow {
    pub dataset: String,
    pub mode: Mode,
    pub ranking: String,
    pub outputs: usize,
    pub feasible_pct: f64,
    pub support_clean_pct: f64,
    /// Over outputs that were audited for consistency.
    pub consistent_pct: Option<f64>,
    /// Feasible and consistent, over successful adversarial examples.
    pub valid_success_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramEntry {
    pub counts: BTreeMap<usize, usize>,
    pub median: Option<f64>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub transfer: Vec<TransferRow>,
    pub histograms: BTreeMap<String, HistogramEntry>,
    pub validity: Vec<ValidityRow>,
}

fn rate(fooled: impl Iterator<Item = Option<bool>>) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for f in fooled.flatten() {
        n += 1;
        hit += usize::from(f);
    }
    (n > 0).then(|| pct(hit as f64, n))
}

/// Aggregate per-sample records into the report tables. Summary and
/// histogram use gradient-mode records; transfer compares them with the
/// importance-mode records of each target.
pub fn build_report(records: &[ResultRecord]) -> Result<Report> {
    let mut by_dataset: BTreeMap<&str, Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        by_dataset.entry(&r.dataset).or_default().push(r);
    }
    let mut report = Report {
        summary: Vec::new(),
        transfer: Vec::new(),
        histograms: BTreeMap::new(),
        validity: Vec::new(),
    };
    for (dataset, rows) in by_dataset {
        let base: Vec<&ResultRecord> = rows.iter().copied().filter(|r| r.mode == Mode::Gradient).collect();
        if let Some(first) = base.first() {
            let wins: Vec<PerturbationMetrics> = base.iter().filter(|r| r.succeeded).map(|r| r.metrics()).collect();
            report.summary.push(summarize(
                dataset,
                base.len(),
                &wins,
                first.n_categorical,
                first.n_numeric,
            )?);
            let mut counts = BTreeMap::new();
            for m in &wins {
                *counts.entry(m.l0_total).or_insert(0) += 1;
            }
            let mm = histogram_median_mean(&counts);
            report.histograms.insert(
                dataset.to_string(),
                HistogramEntry {
                    counts,
                    median: mm.map(|v| v.0),
                    mean: mm.map(|v| v.1),
                },
            );
        }
        for kind in TreeKind::ALL {
            let name = kind.short_name();
            let adjusted: Vec<&ResultRecord> = rows
                .iter()
                .copied()
                .filter(|r| r.mode == Mode::Importance && r.ranking == name)
                .collect();
            let base_pct = rate(base.iter().filter(|r| r.succeeded).map(|r| r.fooled(kind)));
            let adjusted_pct = rate(adjusted.iter().filter(|r| r.succeeded).map(|r| r.fooled(kind)));
            if base_pct.is_some() || adjusted_pct.is_some() {
                report.transfer.push(TransferRow {
                    dataset: dataset.to_string(),
                    model: name.to_string(),
                    base_pct,
                    adjusted_pct,
                });
            }
        }
        let mut groups: BTreeMap<(Mode, &str), Vec<&ResultRecord>> = BTreeMap::new();
        for r in &rows {
            groups.entry((r.mode, r.ranking.as_str())).or_default().push(r);
        }
        for ((mode, ranking), g) in groups {
            let n = g.len();
            let count = |f: &dyn Fn(&ResultRecord) -> bool| g.iter().filter(|r| f(r)).count() as f64;
            let audited = g.iter().filter(|r| r.consistent.is_some()).count();
            let wins: Vec<&&ResultRecord> = g.iter().filter(|r| r.succeeded && r.consistent.is_some()).collect();
            report.validity.push(ValidityRow {
                dataset: dataset.to_string(),
                mode,
                ranking: ranking.to_string(),
                outputs: n,
                feasible_pct: pct(count(&|r| r.feasible), n),
                support_clean_pct: pct(count(&|r| r.support_clean), n),
                consistent_pct: (audited > 0).then(|| pct(count(&|r| r.consistent == Some(true)), audited)),
                valid_success_pct: (!wins.is_empty()).then(|| {
                    pct(
                        wins.iter().filter(|r| r.feasible && r.consistent == Some(true)).count() as f64,
                        wins.len(),
                    )
                }),
            });
        }
    }
    Ok(report)
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

fn csv_text(config_hash: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut out = header_line(config_hash).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Write the four report files into `dir`.
pub fn write_report(dir: &Path, report: &Report, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = report
        .summary
        .iter()
        .map(|s| {
            vec![
                s.dataset.clone(),
                fmt(s.l0_categorical),
                fmt(s.l0_categorical_pct),
                fmt(s.l1_numeric),
                fmt(s.l0_numeric),
                fmt(s.l0_numeric_pct),
                fmt(s.l0_total),
                fmt(s.l0_total_pct),
                fmt(Some(s.success_pct)),
            ]
        })
        .collect();
    write_file(
        &dir.join(SUMMARY_FILE),
        &csv_text(
            config_hash,
            &[
                "dataset",
                "l0_cat",
                "l0_cat_pct",
                "l1_num",
                "l0_num",
                "l0_num_pct",
                "l0_total",
                "l0_total_pct",
                "success_pct",
            ],
            summary,
        )?,
    )?;
    let transfer = report
        .transfer
        .iter()
        .map(|t| vec![t.dataset.clone(), t.model.clone(), fmt(t.base_pct), fmt(t.adjusted_pct)])
        .collect();
    write_file(
        &dir.join(TRANSFER_FILE),
        &csv_text(config_hash, &["dataset", "model", "base_pct", "adjusted_pct"], transfer)?,
    )?;
    let validity = report
        .validity
        .iter()
        .map(|v| {
            vec![
                v.dataset.clone(),
                serde_json::to_value(v.mode)
                    .ok()
                    .and_then(|m| m.as_str().map(str::to_string))
                    .unwrap_or_default(),
                v.ranking.clone(),
                v.outputs.to_string(),
                fmt(Some(v.feasible_pct)),
                fmt(Some(v.support_clean_pct)),
                fmt(v.consistent_pct),
                fmt(v.valid_success_pct),
            ]
        })
        .collect();
    write_file(
        &dir.join(VALIDITY_FILE),
        &csv_text(
            config_hash,
            &[
                "dataset",
                "mode",
                "ranking",
                "outputs",
                "feasible_pct",
                "support_clean_pct",
                "consistent_pct",
                "valid_success_pct",
            ],
            validity,
        )?,
    )?;
    #[derive(Serialize)]
    struct HistogramFile<'a> {
        config_hash: &'a str,
        bin_width: usize,
        histograms: &'a BTreeMap<String, HistogramEntry>,
    }
    let json = serde_json::to_string_pretty(&HistogramFile {
        config_hash,
        bin_width: 1,
        histograms: &report.histograms,
    })?;
    write_file(&dir.join(HISTOGRAM_FILE), format!("{json}\n").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::attack_summary;
    use crate::schema::{FeatureSpec, Schema, Task};
    use ndarray::Array2;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn data() -> Dataset {
        let schema = Arc::new(
            Schema::new(
                Task::BinaryClassification,
                vec![
                    FeatureSpec::categorical("c", ["a", "b", "c"]),
                    FeatureSpec::numeric("u"),
                    FeatureSpec::numeric("v"),
                ],
            )
            .unwrap(),
        );
        Dataset::new(schema, Array2::zeros((1, 3)), vec![0.0]).unwrap()
    }

    fn result(x_star: Vec<f64>, succeeded: bool) -> AttackResult {
        AttackResult {
            x: vec![0.0, 0.5, 0.5],
            y: 0.0,
            selected: (0..3).filter(|&j| x_star[j] != [0.0, 0.5, 0.5][j]).collect(),
            x_star,
            succeeded,
            iterations: 1,
            score_before: 0.2,
            score_after: 0.7,
            trace: vec![],
            aborted: None,
            validity: None,
        }
    }

    fn ctx(d: &Dataset) -> RecordContext<'_> {
        RecordContext {
            dataset: "toy",
            mode: Mode::Gradient,
            ranking: None,
            data: d,
            targets: &[],
            tau: 0.75,
        }
    }

    #[test]
    fn csv_round_trip_and_reaggregation() {
        let d = data();
        let results = vec![
            result(vec![1.0, 0.5, 0.5], true),
            result(vec![2.0, 0.25, 0.5], true),
            result(vec![0.0, 0.1, 0.9], true),
            result(vec![0.0, 0.5, 0.5], false),
        ];
        let recs = records(&ctx(&d), &results).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RESULTS_FILE);
        write_records(&path, &recs, "abc").unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back, recs);
        assert_eq!(read_config_hash(&path).unwrap().as_deref(), Some("abc"));
        let report = build_report(&back).unwrap();
        assert_eq!(
            report.summary,
            vec![attack_summary("toy", &results, d.schema()).unwrap()]
        );
        let h = &report.histograms["toy"];
        assert_eq!(
            h.counts.iter().map(|(&k, &v)| (k, v)).collect::<Vec<_>>(),
            vec![(1, 1), (2, 2)]
        );
        assert!(report.transfer.is_empty());
        write_report(dir.path(), &report, "abc").unwrap();
        let summary = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert!(summary.starts_with("# config_hash=abc\ndataset,l0_cat,"));
        assert!(summary.contains("toy,0.6667,66.6667,0.3500,1.0000,50.0000,1.6667,55.5556,75.0000"));
    }

    #[test]
    fn missing_results_file_is_named() {
        let err = read_records(Path::new("/nonexistent/results.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/results.csv"));
    }

    proptest! {
        #[test]
        fn report_matches_in_memory_summary(cells in proptest::collection::vec((0usize..3, -1.0f64..1.0, proptest::bool::ANY, proptest::bool::ANY), 1..40)) {
            let d = data();
            let results: Vec<AttackResult> = cells
                .iter()
                .map(|&(c, dv, touch, ok)| result(vec![c as f64, if touch { 0.5 + dv / 4.0 } else { 0.5 }, 0.5], ok))
                .collect();
            let recs = records(&ctx(&d), &results).unwrap();
            let report = build_report(&recs).unwrap();
            let direct = attack_summary("toy", &results, d.schema()).unwrap();
            prop_assert_eq!(&report.summary[0], &direct);
            let total: usize = report.histograms["toy"].counts.values().sum();
            prop_assert_eq!(total, direct.succeeded);
        }
    }
}
