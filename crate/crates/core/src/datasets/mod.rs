//! Labeled feature matrices and everything that produces or reshapes them:
//! CSV ingestion, calorie binning, splitting, device partitioning and a
//! synthetic Gaussian-blob generator.

mod csv_load;
mod partition;
mod synth;

pub use csv_load::{bin_calories, load_csv, load_csv_reader, CsvSchema, FeatureColumns, LabelMode, MinMaxScaler};
pub use partition::{partition, split, PartitionMode};
pub use synth::synth_generate;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("feature matrix has {features} values, expected {rows} rows x {dim} columns")]
    Shape { features: usize, rows: usize, dim: usize },
    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("non-finite feature at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("class count must be at least 1")]
    NoClasses,
    #[error("dataset too small: {0}")]
    TooSmall(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("calorie value {0} is negative or not finite")]
    BadCalorie(f64),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}: cannot parse `{value}` in column `{column}` as a number")]
    Unparsable { row: usize, column: String, value: String },
    #[error("row {row}: unknown label `{value}`")]
    UnknownLabel { row: usize, value: String },
    #[error("row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("file has no data rows")]
    Empty,
    #[error("io: {0}")]
    Io(String),
}

/// Row-major `n x d` feature matrix with one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self, DataError> {
        if class_count == 0 {
            return Err(DataError::NoClasses);
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(DataError::Shape { features: features.len(), rows: labels.len(), dim });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(DataError::LabelOutOfRange { row, label, classes: class_count });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { row: i / dim, col: i % dim });
        }
        Ok(Self { features, labels, dim, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// New dataset made of the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Dataset { features, labels, dim: self.dim, class_count: self.class_count }
    }

    /// Stacks datasets with identical shape metadata.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset, DataError> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::InvalidArgument("nothing to concatenate".into()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim != first.dim || p.class_count != first.class_count {
                return Err(DataError::InvalidArgument(
                    "datasets differ in dimension or class count".into(),
                ));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Ok(Dataset { features, labels, dim: first.dim, class_count: first.class_count })
    }

    /// Number of rows per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.class_count];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }

    pub(crate) fn map_features(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        let dim = self.dim;
        for (i, v) in self.features.iter_mut().enumerate() {
            *v = f(i % dim, *v);
        }
    }

    /// Bytes needed to ship the feature matrix as 32-bit floats.
    pub fn payload_bytes(&self) -> usize {
        self.features.len() * 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_label() {
        let err = Dataset::new(vec![0.0, 1.0], 1, vec![0, 3], 3).unwrap_err();
        assert_eq!(err, DataError::LabelOutOfRange { row: 1, label: 3, classes: 3 });
    }

    #[test]
    fn rejects_ragged_features() {
        assert!(matches!(
            Dataset::new(vec![0.0; 5], 2, vec![0, 1], 2),
            Err(DataError::Shape { .. })
        ));
    }

    #[test]
    fn subset_and_concat() {
        let ds = Dataset::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, vec![0, 1, 0], 2).unwrap();
        let s = ds.subset(&[2, 0]);
        assert_eq!(s.features(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(s.labels(), &[0, 0]);
        let c = Dataset::concat(&[&s, &ds]).unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(c.class_histogram(), vec![4, 1]);
    }
}
