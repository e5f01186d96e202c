//! Typed feature space: feature kinds, constraint taxonomy, immutability and
//! the label space.
//!
//! A [`Schema`] is parsed from a JSON manifest of the form
//!
//! ```json
//! {"task": "binary_classification",
//!  "features": [{"name": "age", "kind": "numeric", "constraints": ["integer", "positive"],
//!                "immutable": true, "range": [18, 100]},
//!               {"name": "housing", "kind": "categorical", "constraints": [],
//!                "immutable": false, "categories": ["own", "rent"], "missing_sentinel": "none"}]}
//! ```

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Categorical,
    Numeric,
}

/// Constraint kinds a feature may carry. Features may carry several.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Integer,
    /// Non-negative in raw units.
    Positive,
    /// Non-positive in raw units.
    Negative,
    /// Raw value lies in `[0, 1]`.
    Normalized,
}

/// Value used to fill missing cells of a feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sentinel {
    Number(f64),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
    #[serde(default)]
    pub immutable: bool,
    #[serde(default, rename = "range", skip_serializing_if = "Option::is_none")]
    pub declared_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_sentinel: Option<Sentinel>,
}

impl FeatureSpec {
    pub fn numeric(name: impl Into<String>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Numeric,
            constraints: Vec::new(),
            immutable: false,
            declared_range: None,
            categories: Vec::new(),
            missing_sentinel: None,
        }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, categories: impl IntoIterator<Item = S>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Categorical,
            constraints: Vec::new(),
            immutable: false,
            declared_range: None,
            categories: categories.into_iter().map(Into::into).collect(),
            missing_sentinel: None,
        }
    }

    pub fn with_constraints(mut self, constraints: &[Constraint]) -> Self {
        self.constraints = constraints.to_vec();
        self.constraints.sort();
        self.constraints.dedup();
        self
    }

    pub fn immutable(mut self, immutable: bool) -> Self {
        self.immutable = immutable;
        self
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.declared_range = Some([lo, hi]);
        self
    }

    pub fn has(&self, c: Constraint) -> bool {
        self.constraints.contains(&c)
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == FeatureKind::Categorical
    }

    /// Integer-valued features: categorical codes and integer-constrained numerics.
    pub fn is_discrete(&self) -> bool {
        self.is_categorical() || self.has(Constraint::Integer)
    }

    /// Effective raw-unit bounds implied by the declared range and constraints.
    pub fn raw_bounds(&self) -> (f64, f64) {
        let (mut lo, mut hi) = match self.declared_range {
            Some([lo, hi]) => (lo, hi),
            None => (f64::NEG_INFINITY, f64::INFINITY),
        };
        if self.has(Constraint::Positive) {
            lo = lo.max(0.0);
        }
        if self.has(Constraint::Negative) {
            hi = hi.min(0.0);
        }
        if self.has(Constraint::Normalized) {
            lo = lo.max(0.0);
            hi = hi.min(1.0);
        }
        (lo, hi)
    }

    /// Whether a raw-unit value satisfies every constraint of this feature.
    pub fn admits_raw(&self, v: f64) -> bool {
        if !v.is_finite() {
            return false;
        }
        if self.is_categorical() {
            return v.fract() == 0.0 && v >= 0.0 && (v as usize) < self.categories.len();
        }
        if self.has(Constraint::Integer) && (v - v.round()).abs() > 1e-9 * v.abs().max(1.0) {
            return false;
        }
        let (lo, hi) = self.raw_bounds();
        let tol = 1e-9 * v.abs().max(1.0);
        v >= lo - tol && v <= hi + tol
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Schema("feature with empty name".into()));
        }
        if self.has(Constraint::Positive) && self.has(Constraint::Negative) {
            return Err(Error::Schema(format!(
                "feature {} is declared both positive and negative",
                self.name
            )));
        }
        if self.is_categorical() {
            if let Some(c) = self
                .constraints
                .iter()
                .find(|c| matches!(c, Constraint::Positive | Constraint::Negative | Constraint::Normalized))
            {
                return Err(Error::Schema(format!(
                    "categorical feature {} carries numeric constraint {c:?}",
                    self.name
                )));
            }
            let unique: HashSet<&String> = self.categories.iter().collect();
            if unique.len() != self.categories.len() {
                return Err(Error::Schema(format!("feature {} repeats a category label", self.name)));
            }
        } else if !self.categories.is_empty() {
            return Err(Error::Schema(format!("numeric feature {} lists categories", self.name)));
        }
        if let Some([lo, hi]) = self.declared_range {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::Schema(format!("feature {} has an empty range", self.name)));
            }
        }
        let (lo, hi) = self.raw_bounds();
        if lo > hi {
            return Err(Error::Schema(format!(
                "constraints of feature {} leave no admissible value",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    BinaryClassification,
    Regression,
}

/// Label space `Y`. Binary labels are stored as the scalar `0`/`1`; the
/// one-hot form is available through [`LabelSpace::one_hot`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub task: Task,
    pub classes: usize,
}

impl LabelSpace {
    pub fn new(task: Task) -> Self {
        let classes = match task {
            Task::BinaryClassification => 2,
            Task::Regression => 1,
        };
        LabelSpace { task, classes }
    }

    pub fn is_classification(&self) -> bool {
        self.task == Task::BinaryClassification
    }

    pub fn one_hot(&self, y: f64) -> Vec<f64> {
        match self.task {
            Task::BinaryClassification => {
                let mut v = vec![0.0; self.classes];
                v[(y as usize).min(self.classes - 1)] = 1.0;
                v
            }
            Task::Regression => vec![y],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    features: Vec<FeatureSpec>,
    immutable: Vec<usize>,
    label_space: LabelSpace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    task: Task,
    features: Vec<FeatureSpec>,
}

impl Schema {
    pub fn new(task: Task, features: Vec<FeatureSpec>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Schema("feature list is empty".into()));
        }
        let mut names = HashSet::new();
        let mut features = features;
        for f in features.iter_mut() {
            f.constraints.sort();
            f.constraints.dedup();
            f.validate()?;
            if !names.insert(f.name.clone()) {
                return Err(Error::Schema(format!("duplicate feature name {}", f.name)));
            }
        }
        let immutable = features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.immutable)
            .map(|(i, _)| i)
            .collect();
        Ok(Schema {
            features,
            immutable,
            label_space: LabelSpace::new(task),
        })
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &FeatureSpec {
        &self.features[i]
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    /// Indices of immutable features, ascending.
    pub fn immutable_set(&self) -> &[usize] {
        &self.immutable
    }

    pub fn is_immutable(&self, i: usize) -> bool {
        self.features[i].immutable
    }

    pub fn label_space(&self) -> LabelSpace {
        self.label_space
    }

    pub fn task(&self) -> Task {
        self.label_space.task
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn categorical_count(&self) -> usize {
        self.features.iter().filter(|f| f.is_categorical()).count()
    }

    pub fn numeric_count(&self) -> usize {
        self.dim() - self.categorical_count()
    }

    pub fn to_manifest(&self) -> Result<String> {
        let m = Manifest {
            task: self.task(),
            features: self.features.clone(),
        };
        Ok(serde_json::to_string_pretty(&m)?)
    }
}

/// Parse a JSON schema manifest.
pub fn parse_schema(manifest: &str) -> Result<Schema> {
    let m: Manifest = serde_json::from_str(manifest).map_err(|e| Error::Schema(e.to_string()))?;
    Schema::new(m.task, m.features)
}

/// Every immutable coordinate of `x_star` equals `x`
/// bit for bit.
pub fn check_feasibility(x: &[f64], x_star: &[f64], schema: &Schema) -> Result<bool> {
    for v in [x, x_star] {
        if v.len() != schema.dim() {
            return Err(Error::LengthMismatch {
                expected: schema.dim(),
                actual: v.len(),
            });
        }
    }
    Ok(schema
        .immutable_set()
        .iter()
        .all(|&i| x[i].to_bits() == x_star[i].to_bits()))
}

/// Default perturbation budget: `d - |I|`.
pub fn mutable_count(schema: &Schema) -> usize {
    schema.dim() - schema.immutable_set().len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn credit_like_manifest() -> String {
        // 52 features, 21 categorical, 22 immutable.
        let mut feats = Vec::new();
        for i in 0..52 {
            let categorical = i < 21;
            let immutable = i % 52 < 22;
            let f = if categorical {
                format!(
                    r#"{{"name":"f{i}","kind":"categorical","constraints":[],"immutable":{immutable},"categories":["a","b"]}}"#
                )
            } else {
                format!(r#"{{"name":"f{i}","kind":"numeric","constraints":["positive"],"immutable":{immutable}}}"#)
            };
            feats.push(f);
        }
        format!(r#"{{"task":"binary_classification","features":[{}]}}"#, feats.join(","))
    }

    #[test]
    fn parses_credit_sized_manifest() {
        let s = parse_schema(&credit_like_manifest()).unwrap();
        assert_eq!(s.dim(), 52);
        assert_eq!(s.categorical_count(), 21);
        assert_eq!(s.immutable_set().len(), 22);
        assert_eq!(mutable_count(&s), 30);
    }

    #[test]
    fn minimal_manifest() {
        let s = parse_schema(r#"{"task":"regression","features":[{"name":"x","kind":"numeric"}]}"#).unwrap();
        assert_eq!(s.dim(), 1);
        assert!(s.immutable_set().is_empty());
        assert_eq!(s.label_space().classes, 1);
    }

    #[test]
    fn rejects_contradictions() {
        let both =
            r#"{"task":"regression","features":[{"name":"x","kind":"numeric","constraints":["positive","negative"]}]}"#;
        assert!(matches!(parse_schema(both), Err(Error::Schema(_))));
        let dup = r#"{"task":"regression","features":[{"name":"x","kind":"numeric"},{"name":"x","kind":"numeric"}]}"#;
        assert!(parse_schema(dup).is_err());
        let cat = r#"{"task":"regression","features":[{"name":"c","kind":"categorical","constraints":["normalized"],"categories":["a"]}]}"#;
        assert!(parse_schema(cat).is_err());
        assert!(parse_schema(r#"{"task":"regression","features":[]}"#).is_err());
    }

    #[test]
    fn mutable_count_examples() {
        let feats = (0..126)
            .map(|i| FeatureSpec::numeric(format!("f{i}")).immutable(i < 81))
            .collect();
        assert_eq!(
            mutable_count(&Schema::new(Task::BinaryClassification, feats).unwrap()),
            45
        );
        let feats = (0..7).map(|i| FeatureSpec::numeric(format!("f{i}"))).collect();
        assert_eq!(mutable_count(&Schema::new(Task::Regression, feats).unwrap()), 7);
    }

    #[test]
    fn feasibility_is_exact() {
        let feats = vec![FeatureSpec::numeric("a").immutable(true), FeatureSpec::numeric("b")];
        let s = Schema::new(Task::Regression, feats).unwrap();
        let x = [0.3, 0.7];
        assert!(check_feasibility(&x, &x, &s).unwrap());
        assert!(check_feasibility(&x, &[0.3, 5.0], &s).unwrap());
        assert!(!check_feasibility(&x, &[0.3 + 1e-12, 0.7], &s).unwrap());
        assert!(check_feasibility(&x, &[0.3], &s).is_err());

        let free = Schema::new(Task::Regression, vec![FeatureSpec::numeric("a")]).unwrap();
        assert!(check_feasibility(&[1.0], &[-9.0], &free).unwrap());
    }

    #[test]
    fn manifest_round_trip() {
        let s = parse_schema(&credit_like_manifest()).unwrap();
        let again = parse_schema(&s.to_manifest().unwrap()).unwrap();
        assert_eq!(s, again);
    }

    proptest! {
        #[test]
        fn feasibility_reflexive_and_symmetric(
            immut in proptest::collection::vec(any::<bool>(), 1..12),
            seed in proptest::collection::vec(-1e3f64..1e3, 24),
        ) {
            let d = immut.len();
            let feats = immut.iter().enumerate()
                .map(|(i, &m)| FeatureSpec::numeric(format!("f{i}")).immutable(m))
                .collect();
            let s = Schema::new(Task::Regression, feats).unwrap();
            let x = &seed[..d];
            let y = &seed[12..12 + d];
            prop_assert!(check_feasibility(x, x, &s).unwrap());
            prop_assert_eq!(check_feasibility(x, y, &s).unwrap(), check_feasibility(y, x, &s).unwrap());
            prop_assert_eq!(mutable_count(&s) + s.immutable_set().len(), d);
        }
    }
}
