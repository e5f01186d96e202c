//! Preprocessed samples and datasets.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::preprocess::{Preprocessor, Scaler};
use crate::schema::Schema;

/// One preprocessed sample and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

/// Rows in preprocessed space sharing one schema.
///
/// When a fitted [`Preprocessor`] is attached, constraint checks are made in
/// raw units through its inverse scalers; otherwise values are taken as raw.
#[derive(Debug, Clone)]
pub struct Dataset {
    schema: Arc<Schema>,
    x: Array2<f64>,
    y: Vec<f64>,
    preprocessor: Option<Arc<Preprocessor>>,
}

impl Dataset {
    pub fn new(schema: Arc<Schema>, x: Array2<f64>, y: Vec<f64>) -> Result<Self> {
        Self::build(schema, x, y, None)
    }

    pub fn with_preprocessor(
        schema: Arc<Schema>,
        x: Array2<f64>,
        y: Vec<f64>,
        preprocessor: Arc<Preprocessor>,
    ) -> Result<Self> {
        Self::build(schema, x, y, Some(preprocessor))
    }

    fn build(
        schema: Arc<Schema>,
        x: Array2<f64>,
        y: Vec<f64>,
        preprocessor: Option<Arc<Preprocessor>>,
    ) -> Result<Self> {
        if x.ncols() != schema.dim() {
            return Err(Error::LengthMismatch {
                expected: schema.dim(),
                actual: x.ncols(),
            });
        }
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", x.nrows(), y.len())));
        }
        if let Some(p) = &preprocessor {
            if p.output_dim() != schema.dim() {
                return Err(Error::Shape("preprocessor does not match schema".into()));
            }
        }
        for f in schema.features() {
            if f.is_categorical() && f.categories.is_empty() {
                return Err(Error::Schema(format!(
                    "categorical feature {} has no categories",
                    f.name
                )));
            }
        }
        let ds = Dataset {
            schema,
            x,
            y,
            preprocessor,
        };
        for (i, row) in ds.x.outer_iter().enumerate() {
            ds.validate_row(row).map_err(|e| Error::Data(format!("row {i}: {e}")))?;
        }
        let classification = ds.schema.label_space().is_classification();
        for (i, &label) in ds.y.iter().enumerate() {
            if !label.is_finite() || (classification && label != 0.0 && label != 1.0) {
                return Err(Error::Data(format!("row {i}: invalid label {label}")));
            }
        }
        Ok(ds)
    }

    /// Check every feature constraint on one preprocessed row.
    pub fn validate_row(&self, row: ArrayView1<f64>) -> Result<()> {
        if row.len() != self.schema.dim() {
            return Err(Error::LengthMismatch {
                expected: self.schema.dim(),
                actual: row.len(),
            });
        }
        for (j, (&v, f)) in row.iter().zip(self.schema.features()).enumerate() {
            let raw = self.scaler(j).inverse(v);
            let sentinel = self.preprocessor.as_ref().is_some_and(|p| p.is_sentinel(j, raw));
            if !f.admits_raw(raw) && !sentinel {
                return Err(Error::Data(format!(
                    "feature {} value {v} violates its constraints",
                    f.name
                )));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn preprocessor(&self) -> Option<&Arc<Preprocessor>> {
        self.preprocessor.as_ref()
    }

    /// Scaler mapping raw units of feature `j` to preprocessed units.
    pub fn scaler(&self, j: usize) -> Scaler {
        match &self.preprocessor {
            Some(p) => p.scaler(j),
            None => Scaler::Identity,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.schema.dim()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            x: self.x.row(i).to_vec(),
            y: self.y[i],
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            x: self.x.select(Axis(0), indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            preprocessor: self.preprocessor.clone(),
        }
    }

    /// Row-wise concatenation of datasets sharing a schema.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let views: Vec<_> = parts.iter().map(|d| d.x.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let y = parts.iter().flat_map(|d| d.y.iter().copied()).collect();
        Ok(Dataset {
            schema: first.schema.clone(),
            x,
            y,
            preprocessor: first.preprocessor.clone(),
        })
    }

    /// Write rows in preprocessed units, header = feature names + `target`.
    /// `comment` lines are prefixed with `#`.
    pub fn write_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let mut out = Vec::new();
        if let Some(c) = comment {
            writeln!(out, "# {c}").expect("write to vec");
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = self.schema.features().iter().map(|f| f.name.as_str()).collect();
        header.push("target");
        w.write_record(&header)?;
        for (row, y) in self.x.outer_iter().zip(&self.y) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Read a file produced by [`Dataset::write_csv`].
    pub fn read_csv(path: &Path, schema: Arc<Schema>, preprocessor: Option<Arc<Preprocessor>>) -> Result<Dataset> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let header = r.headers()?.clone();
        let d = schema.dim();
        if header.len() != d + 1 {
            return Err(Error::Data(format!("{}: expected {} columns", path.display(), d + 1)));
        }
        for (h, f) in header.iter().zip(schema.features()) {
            if h != f.name {
                return Err(Error::Data(format!(
                    "{}: column {h} does not match schema",
                    path.display()
                )));
            }
        }
        let mut flat = Vec::new();
        let mut y = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for (j, cell) in rec.iter().enumerate() {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Data(format!("{}: bad number {cell:?}", path.display())))?;
                if j < d {
                    flat.push(v);
                } else {
                    y.push(v);
                }
            }
        }
        let x = Array2::from_shape_vec((y.len(), d), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Self::build(schema, x, y, preprocessor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Constraint, FeatureSpec, Task};
    use ndarray::array;
    use proptest::prelude::*;

    fn schema() -> Arc<Schema> {
        Arc::new(
            Schema::new(
                Task::BinaryClassification,
                vec![
                    FeatureSpec::categorical("c", ["a", "b", "c"]),
                    FeatureSpec::numeric("n").with_constraints(&[Constraint::Integer, Constraint::Positive]),
                    FeatureSpec::numeric("z").with_constraints(&[Constraint::Normalized]),
                ],
            )
            .unwrap(),
        )
    }

    #[test]
    fn rejects_constraint_violations() {
        let s = schema();
        assert!(Dataset::new(s.clone(), array![[0.0, 3.0, 0.5]], vec![1.0]).is_ok());
        assert!(Dataset::new(s.clone(), array![[3.0, 3.0, 0.5]], vec![1.0]).is_err());
        assert!(Dataset::new(s.clone(), array![[0.0, 2.5, 0.5]], vec![1.0]).is_err());
        assert!(Dataset::new(s.clone(), array![[0.0, -1.0, 0.5]], vec![1.0]).is_err());
        assert!(Dataset::new(s.clone(), array![[0.0, 1.0, 1.5]], vec![1.0]).is_err());
        assert!(Dataset::new(s, array![[0.0, 1.0, 0.5]], vec![0.5]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = schema();
        let ds = Dataset::new(
            s.clone(),
            array![[0.0, 3.0, 0.1], [2.0, 7.0, 1.0 / 3.0]],
            vec![1.0, 0.0],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        ds.write_csv(&p, Some("config_hash=abc")).unwrap();
        let back = Dataset::read_csv(&p, s, None).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.labels(), ds.labels());
    }

    proptest! {
        // Rows drawn inside every constraint are always accepted.
        #[test]
        fn admissible_rows_accepted(rows in proptest::collection::vec((0u8..3, 0u32..50, 0.0f64..=1.0), 1..40)) {
            let n = rows.len();
            let flat: Vec<f64> = rows.iter().flat_map(|&(c, k, z)| [c as f64, k as f64, z]).collect();
            let x = Array2::from_shape_vec((n, 3), flat).unwrap();
            let ds = Dataset::new(schema(), x, vec![0.0; n]).unwrap();
            for i in 0..n {
                prop_assert!(ds.validate_row(ds.row(i)).is_ok());
            }
        }
    }
}
