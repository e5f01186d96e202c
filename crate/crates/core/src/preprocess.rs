//! CSV ingestion and the cleaning / imputation / encoding / scaling pipeline,
//! with exact inverse transforms back to raw units.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::schema::{Constraint, FeatureSpec, Schema, Sentinel, Task};

/// A raw CSV table. Empty cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
}

impl RawTable {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_reader(f)
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push(
                rec.iter()
                    .map(|c| {
                        let c = c.trim();
                        (!c.is_empty()).then(|| c.to_string())
                    })
                    .collect(),
            );
        }
        Ok(RawTable { headers, rows })
    }

    /// CSV text with an optional leading `# comment` line; `None` cells are empty.
    pub fn to_csv(&self, comment: Option<&str>) -> Result<String> {
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|c| c.as_deref().unwrap_or("")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        out.push_str(&String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))?);
        Ok(out)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn column(&self, idx: usize) -> Vec<Option<&str>> {
        self.rows
            .iter()
            .map(|r| r.get(idx).and_then(|c| c.as_deref()))
            .collect()
    }

    /// SHA-256 over headers and cells.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for name in &self.headers {
            h.update(name.as_bytes());
            h.update([0x1f]);
        }
        for row in &self.rows {
            for c in row {
                if let Some(c) = c {
                    h.update(c.as_bytes());
                }
                h.update([0x1f]);
            }
            h.update([0x1e]);
        }
        hex::encode(h.finalize())
    }
}

/// Affine map from raw units to preprocessed units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scaler {
    Identity,
    MinMax { lo: f64, hi: f64 },
    Standardize { mean: f64, std: f64 },
}

impl Scaler {
    fn offset_scale(&self) -> (f64, f64) {
        match *self {
            Scaler::Identity => (0.0, 1.0),
            Scaler::MinMax { lo, hi } => (lo, hi - lo),
            Scaler::Standardize { mean, std } => (mean, std),
        }
    }

    pub fn forward(&self, raw: f64) -> f64 {
        match self {
            Scaler::Identity => raw,
            _ => {
                let (o, s) = self.offset_scale();
                (raw - o) / s
            }
        }
    }

    pub fn inverse(&self, v: f64) -> f64 {
        match self {
            Scaler::Identity => v,
            _ => {
                let (o, s) = self.offset_scale();
                o + v * s
            }
        }
    }

    /// Derivative of preprocessed units with respect to raw units.
    pub fn slope(&self) -> f64 {
        1.0 / self.offset_scale().1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKind {
    #[default]
    MinMax,
    Standardize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeRule {
    Mode,
    Mean,
    Sentinel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnseenCategory {
    #[default]
    Error,
    MapToMode,
}

/// A raw-unit cell value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Number(f64),
    Label(String),
    Missing(Option<()>),
}

impl std::fmt::Display for RawValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RawValue::Number(v) => write!(f, "{v}"),
            RawValue::Label(s) => f.write_str(s),
            RawValue::Missing(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Features with a missing rate above this are dropped.
    pub missing_threshold: f64,
    /// Groups with pairwise |r| above this keep one seeded representative.
    pub correlation_threshold: f64,
    pub seed: u64,
    pub scaling: ScalingKind,
    pub scaling_overrides: BTreeMap<String, ScalingKind>,
    pub imputation_overrides: BTreeMap<String, ImputeRule>,
    /// Quantile bounds for outlier clipping of numeric features, e.g. `[0.005, 0.995]`.
    pub winsorize: Option<[f64; 2]>,
    pub unseen_category: UnseenCategory,
    pub target_column: String,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            missing_threshold: 0.75,
            correlation_threshold: 0.95,
            seed: 0,
            scaling: ScalingKind::MinMax,
            scaling_overrides: BTreeMap::new(),
            imputation_overrides: BTreeMap::new(),
            winsorize: None,
            unseen_category: UnseenCategory::Error,
            target_column: "target".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    MissingRate { rate: f64 },
    Correlated { kept: String, r: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedFeature {
    pub name: String,
    #[serde(flatten)]
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputation {
    pub rule: ImputeRule,
    pub fill: RawValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedFeature {
    pub spec: FeatureSpec,
    pub imputation: Imputation,
    pub scaler: Scaler,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<[f64; 2]>,
}

/// Fitted preprocessing pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub task: Task,
    pub target_column: String,
    pub features: Vec<FittedFeature>,
    pub dropped: Vec<DroppedFeature>,
    pub unseen_category: UnseenCategory,
    pub fitted_on: String,
}

fn parse_number(feature: &str, cell: &str) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Data(format!("non-numeric value {cell:?} in numeric column {feature}")))
}

/// Pearson correlation over rows where both columns are observed.
pub fn pearson_observed(a: &[Option<f64>], b: &[Option<f64>]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = a.iter().zip(b).filter_map(|(x, y)| Some(((*x)?, (*y)?))).collect();
    if pairs.len() < 3 {
        return None;
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        self.0[i] = r;
        r
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Fit the preprocessing pipeline on a raw table.
pub fn fit_preprocessor(table: &RawTable, schema: &Schema, config: &PreprocessConfig) -> Result<Preprocessor> {
    let n = table.rows.len();
    if n == 0 {
        return Err(Error::Data("table has no rows".into()));
    }
    if table.column_index(&config.target_column).is_none() {
        return Err(Error::Data(format!("missing target column {}", config.target_column)));
    }
    let mut columns = Vec::with_capacity(schema.dim());
    for f in schema.features() {
        let idx = table
            .column_index(&f.name)
            .ok_or_else(|| Error::Data(format!("column {} absent from table", f.name)))?;
        columns.push(table.column(idx));
    }

    let mut dropped = Vec::new();
    let mut alive: Vec<usize> = Vec::new();
    for (j, col) in columns.iter().enumerate() {
        let missing = col.iter().filter(|c| c.is_none()).count();
        let rate = missing as f64 / n as f64;
        if rate > config.missing_threshold {
            dropped.push(DroppedFeature {
                name: schema.feature(j).name.clone(),
                reason: DropReason::MissingRate { rate },
            });
        } else {
            alive.push(j);
        }
    }

    // Parse numeric columns once, rejecting non-numeric content.
    let mut numeric: HashMap<usize, Vec<Option<f64>>> = HashMap::new();
    for &j in &alive {
        let f = schema.feature(j);
        if !f.is_categorical() {
            let vals = columns[j]
                .iter()
                .map(|c| c.map(|s| parse_number(&f.name, s)).transpose())
                .collect::<Result<Vec<_>>>()?;
            numeric.insert(j, vals);
        }
    }

    // Correlated groups: connected components of the |r| > threshold graph.
    let num_alive: Vec<usize> = alive.iter().copied().filter(|j| numeric.contains_key(j)).collect();
    let mut uf = UnionFind((0..schema.dim()).collect());
    let mut strongest: HashMap<(usize, usize), f64> = HashMap::new();
    for (a, &ja) in num_alive.iter().enumerate() {
        for &jb in &num_alive[a + 1..] {
            if let Some(r) = pearson_observed(&numeric[&ja], &numeric[&jb]) {
                if r.abs() > config.correlation_threshold {
                    uf.union(ja, jb);
                    strongest.insert((ja, jb), r);
                }
            }
        }
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    {
        let mut by_root: HashMap<usize, Vec<usize>> = HashMap::new();
        for &j in &num_alive {
            by_root.entry(uf.find(j)).or_default().push(j);
        }
        for (_, mut members) in by_root {
            if members.len() > 1 {
                members.sort_by(|a, b| schema.feature(*a).name.cmp(&schema.feature(*b).name));
                groups.insert(schema.feature(members[0]).name.clone(), members);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut removed = Vec::new();
    for members in groups.values() {
        let keep = members[rng.random_range(0..members.len())];
        for &m in members {
            if m != keep {
                let key = (m.min(keep), m.max(keep));
                let r = strongest
                    .get(&key)
                    .copied()
                    .or_else(|| pearson_observed(&numeric[&m], &numeric[&keep]))
                    .unwrap_or(f64::NAN);
                dropped.push(DroppedFeature {
                    name: schema.feature(m).name.clone(),
                    reason: DropReason::Correlated {
                        kept: schema.feature(keep).name.clone(),
                        r,
                    },
                });
                removed.push(m);
            }
        }
    }
    alive.retain(|j| !removed.contains(j));
    if alive.is_empty() {
        return Err(Error::Data("every feature was dropped".into()));
    }

    let mut features = Vec::with_capacity(alive.len());
    for &j in &alive {
        let spec = schema.feature(j);
        let fitted = if spec.is_categorical() {
            fit_categorical(spec, &columns[j], config)?
        } else {
            fit_numeric(spec, &numeric[&j], config)?
        };
        features.push(fitted);
    }

    Ok(Preprocessor {
        task: schema.task(),
        target_column: config.target_column.clone(),
        features,
        dropped,
        unseen_category: config.unseen_category,
        fitted_on: table.fingerprint(),
    })
}

fn fit_categorical(spec: &FeatureSpec, col: &[Option<&str>], config: &PreprocessConfig) -> Result<FittedFeature> {
    let mut spec = spec.clone();
    if spec.categories.is_empty() {
        for c in col.iter().flatten() {
            if !spec.categories.iter().any(|k| k == c) {
                spec.categories.push(c.to_string());
            }
        }
    }
    let rule = config
        .imputation_overrides
        .get(&spec.name)
        .copied()
        .unwrap_or(if spec.missing_sentinel.is_some() {
            ImputeRule::Sentinel
        } else {
            ImputeRule::Mode
        });
    let fill = match rule {
        ImputeRule::Sentinel => {
            let label = match &spec.missing_sentinel {
                Some(Sentinel::Label(s)) => s.clone(),
                Some(Sentinel::Number(v)) => v.to_string(),
                None => return Err(Error::Config(format!("feature {} has no sentinel declared", spec.name))),
            };
            if !spec.categories.contains(&label) {
                spec.categories.push(label.clone());
            }
            RawValue::Label(label)
        }
        ImputeRule::Mode => {
            let mut counts = vec![0usize; spec.categories.len()];
            for c in col.iter().flatten() {
                if let Some(k) = spec.categories.iter().position(|x| x == c) {
                    counts[k] += 1;
                }
            }
            // First maximum wins, i.e. the lowest code among ties.
            let mut best = 0;
            for (k, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = k;
                }
            }
            RawValue::Label(spec.categories[best].clone())
        }
        ImputeRule::Mean => {
            return Err(Error::Config(format!(
                "mean imputation on categorical feature {}",
                spec.name
            )))
        }
    };
    if spec.categories.is_empty() {
        return Err(Error::Data(format!(
            "categorical feature {} has no observed labels",
            spec.name
        )));
    }
    Ok(FittedFeature {
        spec,
        imputation: Imputation { rule, fill },
        scaler: Scaler::Identity,
        clip: None,
    })
}

fn fit_numeric(spec: &FeatureSpec, col: &[Option<f64>], config: &PreprocessConfig) -> Result<FittedFeature> {
    let integer = spec.has(Constraint::Integer);
    let mut observed: Vec<f64> = col.iter().flatten().copied().collect();
    observed.sort_by(f64::total_cmp);

    let clip = match config.winsorize {
        Some([ql, qh]) if !observed.is_empty() => {
            let (mut lo, mut hi) = (quantile(&observed, ql), quantile(&observed, qh));
            if integer {
                lo = lo.floor();
                hi = hi.ceil();
            }
            Some([lo, hi])
        }
        _ => None,
    };
    let clipped = |v: f64| match clip {
        Some([lo, hi]) => v.clamp(lo, hi),
        None => v,
    };

    let rule = config
        .imputation_overrides
        .get(&spec.name)
        .copied()
        .unwrap_or(if spec.missing_sentinel.is_some() {
            ImputeRule::Sentinel
        } else {
            ImputeRule::Mean
        });
    let fill = match rule {
        ImputeRule::Sentinel => match &spec.missing_sentinel {
            Some(Sentinel::Number(v)) => *v,
            _ => return Err(Error::Config(format!("feature {} needs a numeric sentinel", spec.name))),
        },
        ImputeRule::Mean => {
            if observed.is_empty() {
                return Err(Error::Data(format!("feature {} has no observed values", spec.name)));
            }
            let m = observed.iter().map(|&v| clipped(v)).sum::<f64>() / observed.len() as f64;
            // Mean of an integer feature is rounded so the imputed cell stays integral.
            if integer {
                m.round()
            } else {
                m
            }
        }
        ImputeRule::Mode => {
            if observed.is_empty() {
                return Err(Error::Data(format!("feature {} has no observed values", spec.name)));
            }
            let mut best = (observed[0], 0usize);
            let mut i = 0;
            while i < observed.len() {
                let mut k = i;
                while k < observed.len() && observed[k] == observed[i] {
                    k += 1;
                }
                if k - i > best.1 {
                    best = (observed[i], k - i);
                }
                i = k;
            }
            best.0
        }
    };

    let filled: Vec<f64> = col.iter().map(|v| clipped(v.unwrap_or(fill))).collect();
    let scaling = config
        .scaling_overrides
        .get(&spec.name)
        .copied()
        .unwrap_or(config.scaling);
    let scaler = if spec.has(Constraint::Normalized) {
        Scaler::MinMax { lo: 0.0, hi: 1.0 }
    } else {
        match scaling {
            ScalingKind::MinMax => {
                let lo = filled.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = filled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Scaler::MinMax {
                    lo,
                    hi: if hi > lo { hi } else { lo + 1.0 },
                }
            }
            ScalingKind::Standardize => {
                let n = filled.len() as f64;
                let mean = filled.iter().sum::<f64>() / n;
                let var = filled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let std = var.sqrt();
                Scaler::Standardize {
                    mean,
                    std: if std > 0.0 { std } else { 1.0 },
                }
            }
        }
    };
    Ok(FittedFeature {
        spec: spec.clone(),
        imputation: Imputation {
            rule,
            fill: RawValue::Number(fill),
        },
        scaler,
        clip,
    })
}

impl Preprocessor {
    pub fn output_dim(&self) -> usize {
        self.features.len()
    }

    /// Schema of the surviving features, categories filled in.
    pub fn output_schema(&self) -> Result<Schema> {
        Schema::new(self.task, self.features.iter().map(|f| f.spec.clone()).collect())
    }

    pub fn scaler(&self, j: usize) -> Scaler {
        self.features[j].scaler
    }

    /// Whether `raw` (raw units, codes for categoricals) is the imputation sentinel of feature `j`.
    pub fn is_sentinel(&self, j: usize, raw: f64) -> bool {
        let f = &self.features[j];
        if f.imputation.rule != ImputeRule::Sentinel {
            return false;
        }
        match &f.imputation.fill {
            RawValue::Number(v) => *v == raw,
            RawValue::Label(l) => f.spec.categories.iter().position(|c| c == l) == Some(raw as usize),
            RawValue::Missing(_) => false,
        }
    }

    /// Encode one raw cell of surviving feature `j` into preprocessed units.
    pub fn encode(&self, j: usize, cell: &RawValue) -> Result<f64> {
        let f = &self.features[j];
        let cell = match cell {
            RawValue::Missing(_) => &f.imputation.fill,
            c => c,
        };
        if f.spec.is_categorical() {
            let label = cell.to_string();
            match f.spec.categories.iter().position(|c| *c == label) {
                Some(code) => Ok(code as f64),
                None => match self.unseen_category {
                    UnseenCategory::Error => Err(Error::UnseenCategory {
                        feature: f.spec.name.clone(),
                        label,
                    }),
                    UnseenCategory::MapToMode => self.encode(j, &f.imputation.fill),
                },
            }
        } else {
            let v = match cell {
                RawValue::Number(v) => *v,
                RawValue::Label(s) => parse_number(&f.spec.name, s)?,
                RawValue::Missing(_) => unreachable!(),
            };
            let v = match f.clip {
                Some([lo, hi]) => v.clamp(lo, hi),
                None => v,
            };
            Ok(f.scaler.forward(v))
        }
    }

    /// Map one preprocessed value of feature `j` back to raw units.
    pub fn decode(&self, j: usize, v: f64) -> Result<RawValue> {
        let f = &self.features[j];
        if f.spec.is_categorical() {
            if v.fract() != 0.0 || v < 0.0 || v as usize >= f.spec.categories.len() {
                return Err(Error::CodeOutOfRange {
                    feature: f.spec.name.clone(),
                    code: v,
                });
            }
            return Ok(RawValue::Label(f.spec.categories[v as usize].clone()));
        }
        let raw = f.scaler.inverse(v);
        Ok(RawValue::Number(if f.spec.has(Constraint::Integer) {
            raw.round()
        } else {
            raw
        }))
    }

    fn parse_label(&self, cell: Option<&str>, row: usize) -> Result<f64> {
        let cell = cell.ok_or_else(|| Error::Data(format!("row {row}: missing target")))?;
        let y: f64 = cell
            .parse()
            .map_err(|_| Error::Data(format!("row {row}: non-numeric target {cell:?}")))?;
        if self.task == Task::BinaryClassification && y != 0.0 && y != 1.0 {
            return Err(Error::Data(format!("row {row}: binary target must be 0 or 1, got {y}")));
        }
        Ok(y)
    }
}

/// Apply a fitted preprocessor to a raw table.
pub fn transform(p: &Arc<Preprocessor>, table: &RawTable) -> Result<Dataset> {
    let d = p.output_dim();
    let idx = p
        .features
        .iter()
        .map(|f| {
            table
                .column_index(&f.spec.name)
                .ok_or_else(|| Error::Data(format!("column {} absent from table", f.spec.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let target = table
        .column_index(&p.target_column)
        .ok_or_else(|| Error::Data(format!("missing target column {}", p.target_column)))?;
    let mut flat = Vec::with_capacity(table.rows.len() * d);
    let mut y = Vec::with_capacity(table.rows.len());
    for (r, row) in table.rows.iter().enumerate() {
        for (j, &c) in idx.iter().enumerate() {
            let cell = match row.get(c).and_then(|v| v.as_deref()) {
                None => RawValue::Missing(None),
                Some(s) => RawValue::Label(s.to_string()),
            };
            flat.push(p.encode(j, &cell)?);
        }
        y.push(p.parse_label(row.get(target).and_then(|v| v.as_deref()), r)?);
    }
    let x = Array2::from_shape_vec((y.len(), d), flat).map_err(|e| Error::Shape(e.to_string()))?;
    Dataset::with_preprocessor(Arc::new(p.output_schema()?), x, y, p.clone())
}

/// Render a preprocessed sample in raw units, keyed by feature name.
pub fn inverse_transform(p: &Preprocessor, sample: &[f64]) -> Result<Vec<(String, RawValue)>> {
    if sample.len() != p.output_dim() {
        return Err(Error::LengthMismatch {
            expected: p.output_dim(),
            actual: sample.len(),
        });
    }
    sample
        .iter()
        .enumerate()
        .map(|(j, &v)| Ok((p.features[j].spec.name.clone(), p.decode(j, v)?)))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub attack_set_size: usize,
    pub seed: u64,
    /// Stratify the train/validation split by class (classification only).
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            validation_fraction: 0.2,
            attack_set_size: 500,
            seed: 0,
            stratify: true,
        }
    }
}

/// Pairwise-disjoint row indices, each ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub attack: Vec<usize>,
}

pub struct Split {
    pub indices: SplitIndices,
    pub train: Dataset,
    pub validation: Dataset,
    pub attack: Dataset,
}

/// Draw the attack set, then split the remainder into train/validation.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    if (spec.train_fraction + spec.validation_fraction - 1.0).abs() > 1e-9
        || !(0.0..=1.0).contains(&spec.train_fraction)
    {
        return Err(Error::Config("train and validation fractions must sum to 1".into()));
    }
    let n = dataset.len();
    if n <= spec.attack_set_size {
        return Err(Error::TooSmall(format!(
            "{n} rows cannot hold an attack set of {}",
            spec.attack_set_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut attack = order[..spec.attack_set_size].to_vec();
    let rest = &order[spec.attack_set_size..];
    let n_train_total = (spec.train_fraction * rest.len() as f64).round() as usize;

    let (mut train, mut validation) = (Vec::new(), Vec::new());
    if spec.stratify && dataset.schema().label_space().is_classification() {
        let mut by_class: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for &i in rest {
            by_class.entry(dataset.labels()[i].to_bits()).or_default().push(i);
        }
        // Largest-remainder allocation so the train total is exact.
        let exact: Vec<f64> = by_class
            .values()
            .map(|m| spec.train_fraction * m.len() as f64)
            .collect();
        let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut short = n_train_total.saturating_sub(quota.iter().sum());
        let mut order: Vec<usize> = (0..quota.len()).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for k in order {
            if short == 0 {
                break;
            }
            quota[k] += 1;
            short -= 1;
        }
        for (members, q) in by_class.values().zip(quota) {
            train.extend_from_slice(&members[..q]);
            validation.extend_from_slice(&members[q..]);
        }
    } else {
        train.extend_from_slice(&rest[..n_train_total]);
        validation.extend_from_slice(&rest[n_train_total..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    attack.sort_unstable();
    Ok(Split {
        train: dataset.subset(&train),
        validation: dataset.subset(&validation),
        attack: dataset.subset(&attack),
        indices: SplitIndices {
            train,
            validation,
            attack,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::parse_schema;
    use proptest::prelude::*;

    fn table(csv: &str) -> RawTable {
        RawTable::from_reader(csv.as_bytes()).unwrap()
    }

    fn fit(csv: &str, schema: &str) -> (Arc<Preprocessor>, Dataset) {
        let t = table(csv);
        let s = parse_schema(schema).unwrap();
        let p = Arc::new(fit_preprocessor(&t, &s, &PreprocessConfig::default()).unwrap());
        let ds = transform(&p, &t).unwrap();
        (p, ds)
    }

    #[test]
    fn drops_mostly_missing_column() {
        let csv = "a,b,target\n1,,0\n2,,1\n3,,0\n4,,1\n5,7,0\n";
        let s = r#"{"task":"binary_classification","features":[{"name":"a","kind":"numeric"},{"name":"b","kind":"numeric"}]}"#;
        let (p, ds) = fit(csv, s);
        assert_eq!(p.dropped.len(), 1);
        assert_eq!(p.dropped[0].name, "b");
        assert!(matches!(p.dropped[0].reason, DropReason::MissingRate { rate } if (rate - 0.8).abs() < 1e-12));
        assert_eq!(ds.dim(), 1);
    }

    #[test]
    fn identical_columns_keep_one() {
        let csv = "a,b,c,target\n1,1,5,0\n2,2,3,1\n3,3,9,0\n4,4,1,1\n";
        let s = r#"{"task":"binary_classification","features":[{"name":"a","kind":"numeric"},{"name":"b","kind":"numeric"},{"name":"c","kind":"numeric"}]}"#;
        let (p, _) = fit(csv, s);
        assert_eq!(p.dropped.len(), 1);
        let names: Vec<_> = p.features.iter().map(|f| f.spec.name.as_str()).collect();
        assert!(names.contains(&"c"));
        assert_eq!(names.len(), 2);
    }

    /// Two-pass Pearson straight from the definition.
    fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn correlated_pair_against_oracle() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 2.5, 2.8, 4.4, 4.7, 6.3];
        let c = [5.0, 1.0, 4.0, 2.0, 6.0, 3.0];
        let r_ab = pearson_oracle(&a, &b);
        assert!(r_ab > 0.95 && r_ab < 0.99, "fixture should sit near 0.97, got {r_ab}");
        assert!(pearson_oracle(&a, &c).abs() < 0.95);
        assert!(pearson_oracle(&b, &c).abs() < 0.95);
        let obs = |v: &[f64]| v.iter().map(|&x| Some(x)).collect::<Vec<_>>();
        assert!((pearson_observed(&obs(&a), &obs(&b)).unwrap() - r_ab).abs() < 1e-12);

        let mut csv = String::from("A,B,C,target\n");
        for i in 0..6 {
            csv += &format!("{},{},{},{}\n", a[i], b[i], c[i], i % 2);
        }
        let s = r#"{"task":"binary_classification","features":[{"name":"A","kind":"numeric"},{"name":"B","kind":"numeric"},{"name":"C","kind":"numeric"}]}"#;
        let (p, _) = fit(&csv, s);
        assert_eq!(p.dropped.len(), 1);
        assert!(p.dropped[0].name == "A" || p.dropped[0].name == "B");
        assert!(p.features.iter().any(|f| f.spec.name == "C"));
    }

    #[test]
    fn encoding_scaling_and_imputation() {
        let csv = "color,n,m,target\nred,0,1,0\nblue,5,,1\nred,10,3,0\n";
        let s = r#"{"task":"binary_classification","features":[
            {"name":"color","kind":"categorical"},
            {"name":"n","kind":"numeric"},
            {"name":"m","kind":"numeric"}]}"#;
        let cfg = PreprocessConfig {
            correlation_threshold: 1.1,
            ..PreprocessConfig::default()
        };
        let t = table(csv);
        let p = Arc::new(fit_preprocessor(&t, &parse_schema(s).unwrap(), &cfg).unwrap());
        let ds = transform(&p, &t).unwrap();
        let col = |j: usize| ds.features().column(j).to_vec();
        assert_eq!(col(0), vec![0.0, 1.0, 0.0]);
        assert_eq!(col(1), vec![0.0, 0.5, 1.0]);
        // mean of observed {1, 3} = 2 fills the gap, then minmax over [1, 3].
        assert_eq!(p.features[2].imputation.fill, RawValue::Number(2.0));
        assert_eq!(col(2), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn inverse_examples() {
        let p = Preprocessor {
            task: Task::Regression,
            target_column: "target".into(),
            features: vec![
                FittedFeature {
                    spec: FeatureSpec::numeric("a"),
                    imputation: Imputation {
                        rule: ImputeRule::Mean,
                        fill: RawValue::Number(0.0),
                    },
                    scaler: Scaler::MinMax { lo: 0.0, hi: 10.0 },
                    clip: None,
                },
                FittedFeature {
                    spec: FeatureSpec::categorical("c", ["red", "blue"]),
                    imputation: Imputation {
                        rule: ImputeRule::Mode,
                        fill: RawValue::Label("red".into()),
                    },
                    scaler: Scaler::Identity,
                    clip: None,
                },
                FittedFeature {
                    spec: FeatureSpec::numeric("z"),
                    imputation: Imputation {
                        rule: ImputeRule::Mean,
                        fill: RawValue::Number(3.0),
                    },
                    scaler: Scaler::Standardize { mean: 3.0, std: 2.0 },
                    clip: None,
                },
            ],
            dropped: vec![],
            unseen_category: UnseenCategory::Error,
            fitted_on: String::new(),
        };
        let raw = inverse_transform(&p, &[0.5, 1.0, 1.5]).unwrap();
        assert_eq!(raw[0].1, RawValue::Number(5.0));
        assert_eq!(raw[1].1, RawValue::Label("blue".into()));
        // mu + sigma * z = 3 + 2 * 1.5
        assert_eq!(raw[2].1, RawValue::Number(6.0));
        assert!(matches!(
            inverse_transform(&p, &[0.5, 2.0, 0.0]),
            Err(Error::CodeOutOfRange { .. })
        ));
    }

    #[test]
    fn unseen_category_policy() {
        let csv = "c,target\na,0\nb,1\na,1\n";
        let s =
            parse_schema(r#"{"task":"binary_classification","features":[{"name":"c","kind":"categorical"}]}"#).unwrap();
        let t = table(csv);
        let p = fit_preprocessor(&t, &s, &PreprocessConfig::default()).unwrap();
        let probe = table("c,target\nz,0\n");
        assert!(matches!(
            transform(&Arc::new(p.clone()), &probe),
            Err(Error::UnseenCategory { .. })
        ));
        let mut p2 = p;
        p2.unseen_category = UnseenCategory::MapToMode;
        let ds = transform(&Arc::new(p2), &probe).unwrap();
        assert_eq!(ds.row(0)[0], 0.0);
    }

    #[test]
    fn non_numeric_and_all_dropped_errors() {
        let s = parse_schema(r#"{"task":"regression","features":[{"name":"a","kind":"numeric"}]}"#).unwrap();
        assert!(fit_preprocessor(&table("a,target\n1,0\nx,1\n"), &s, &PreprocessConfig::default()).is_err());
        assert!(fit_preprocessor(&table("a,target\n,0\n,1\n"), &s, &PreprocessConfig::default()).is_err());
    }

    fn synthetic_dataset(n: usize) -> Dataset {
        let schema = Arc::new(Schema::new(Task::BinaryClassification, vec![FeatureSpec::numeric("x")]).unwrap());
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let y = (0..n).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        Dataset::new(schema, x, y).unwrap()
    }

    #[test]
    fn split_proportions_and_determinism() {
        let ds = synthetic_dataset(10_500);
        let spec = SplitSpec {
            seed: 3,
            ..SplitSpec::default()
        };
        let s1 = split(&ds, &spec).unwrap();
        assert_eq!(s1.indices.train.len(), 8_000);
        assert_eq!(s1.indices.validation.len(), 2_000);
        assert_eq!(s1.indices.attack.len(), 500);
        let s2 = split(&ds, &spec).unwrap();
        assert_eq!(s1.indices, s2.indices);
        let mut all: Vec<usize> = s1
            .indices
            .train
            .iter()
            .chain(&s1.indices.validation)
            .chain(&s1.indices.attack)
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 10_500);

        let none = split(
            &ds,
            &SplitSpec {
                attack_set_size: 0,
                ..spec.clone()
            },
        )
        .unwrap();
        assert!(none.indices.attack.is_empty());
        assert_eq!(none.indices.train.len(), 8_400);
        assert!(split(&synthetic_dataset(10), &spec).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_through_raw_units(
            vals in proptest::collection::vec((0usize..3, 0i64..40, -50.0f64..50.0), 4..30),
            probe in (0usize..3, 0i64..40, 0.0f64..=1.0),
        ) {
            let mut csv = String::from("c,k,v,target\n");
            for (i, (c, k, v)) in vals.iter().enumerate() {
                csv += &format!("{},{},{},{}\n", ["x", "y", "z"][*c], k, v, i % 2);
            }
            csv += "x,0,-50,0\nz,40,50,1\ny,20,0,0\n";
            let s = parse_schema(r#"{"task":"binary_classification","features":[
                {"name":"c","kind":"categorical"},
                {"name":"k","kind":"numeric","constraints":["integer","positive"]},
                {"name":"v","kind":"numeric"}]}"#).unwrap();
            let cfg = PreprocessConfig {
                correlation_threshold: 1.1,
                ..PreprocessConfig::default()
            };
            let t = table(&csv);
            let p = Arc::new(fit_preprocessor(&t, &s, &cfg).unwrap());
            let ds = transform(&p, &t).unwrap();
            for i in 0..ds.len() {
                prop_assert!(ds.validate_row(ds.row(i)).is_ok());
            }
            // A valid post-transform sample: observed code, integer grid point, in-range real.
            let code = probe.0 as f64;
            let kk = p.scaler(1).forward(probe.1 as f64);
            let vv = probe.2;
            let raw = inverse_transform(&p, &[code, kk, vv]).unwrap();
            prop_assert_eq!(p.encode(0, &raw[0].1).unwrap(), code);
            prop_assert_eq!(p.encode(1, &raw[1].1).unwrap(), kk);
            let back = p.encode(2, &raw[2].1).unwrap();
            prop_assert!((back - vv).abs() <= 1e-12 * vv.abs().max(1.0));
        }

        #[test]
        fn dropping_is_column_order_independent(perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
            let names = ["a", "b", "c", "d"];
            let data: [[f64; 4]; 6] = [
                [1.0, 1.0, 5.0, 2.0], [2.0, 2.1, 1.0, 4.1], [3.0, 2.9, 4.0, 6.0],
                [4.0, 4.0, 2.0, 8.2], [5.0, 5.2, 6.0, 9.9], [6.0, 6.0, 3.0, 12.0],
            ];
            let mut csv = perm.iter().map(|&k| names[k]).collect::<Vec<_>>().join(",") + ",target\n";
            for (r, row) in data.iter().enumerate() {
                csv += &(perm.iter().map(|&k| row[k].to_string()).collect::<Vec<_>>().join(",") + &format!(",{}\n", r % 2));
            }
            let feats = perm.iter().map(|&k| format!(r#"{{"name":"{}","kind":"numeric"}}"#, names[k])).collect::<Vec<_>>().join(",");
            let s = parse_schema(&format!(r#"{{"task":"binary_classification","features":[{feats}]}}"#)).unwrap();
            let p = fit_preprocessor(&table(&csv), &s, &PreprocessConfig::default()).unwrap();
            let mut kept: Vec<_> = p.features.iter().map(|f| f.spec.name.clone()).collect();
            kept.sort();
            let reference = {
                let csv0 = "a,b,c,d,target\n".to_string() + &data.iter().enumerate()
                    .map(|(r, row)| format!("{},{},{},{},{}\n", row[0], row[1], row[2], row[3], r % 2)).collect::<String>();
                let s0 = parse_schema(r#"{"task":"binary_classification","features":[{"name":"a","kind":"numeric"},{"name":"b","kind":"numeric"},{"name":"c","kind":"numeric"},{"name":"d","kind":"numeric"}]}"#).unwrap();
                let p0 = fit_preprocessor(&table(&csv0), &s0, &PreprocessConfig::default()).unwrap();
                let mut k: Vec<_> = p0.features.iter().map(|f| f.spec.name.clone()).collect();
                k.sort();
                k
            };
            prop_assert_eq!(kept, reference);
        }
    }
}
