//! Tabular datasets, min-max scaling, fold protocols and synthetic generators.

mod folds;
mod scaler;
mod toy;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Tensor;

pub use folds::{load_folds, split_folds, Fold, FoldSource, FoldSplit};
pub use scaler::{nll_scale_correction, Scaler};
pub use toy::{gen_heteroscedastic_gaussian, gen_toy_bimodal, gen_toy_sinusoidal, ToyGenerator};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{0}: file has no header row")]
    Empty(PathBuf),
    #[error("target column `{column}` not found (columns: {available})")]
    MissingColumn { column: String, available: String },
    #[error("line {line}, column `{column}`: `{value}` is not a number")]
    NonNumeric {
        line: u64,
        column: String,
        value: String,
    },
    #[error("line {line}, column `{column}`: non-finite value")]
    NonFinite { line: u64, column: String },
    #[error("row counts disagree: {x_rows} feature rows, {y_rows} outcomes")]
    RowMismatch { x_rows: usize, y_rows: usize },
    #[error("expected {expected} feature columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{file}: index {index} out of range, valid indices are 0..{}", .n.saturating_sub(1))]
    IndexOutOfRange {
        file: PathBuf,
        index: usize,
        n: usize,
    },
    #[error("{file}, line {line}: `{token}` is not a row index")]
    MalformedIndex {
        file: PathBuf,
        line: usize,
        token: String,
    },
    #[error("invalid fold specification: {0}")]
    InvalidFolds(String),
    #[error("cannot fit a scaler on an empty dataset")]
    EmptyDataset,
    #[error("unknown generator `{0}` (expected sinusoidal, bimodal or heteroscedastic)")]
    UnknownGenerator(String),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Which column of a CSV holds the outcome.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TargetColumn {
    Named(String),
    Last,
}

impl From<&str> for TargetColumn {
    /// `"LAST"` (any case) selects the last column.
    fn from(s: &str) -> Self {
        if s.eq_ignore_ascii_case("last") {
            Self::Last
        } else {
            Self::Named(s.to_string())
        }
    }
}

/// Features `x` (`n x P`) and outcome `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

impl Dataset {
    pub fn new(
        x: Tensor,
        y: Vec<f64>,
        feature_names: Vec<String>,
        target_name: impl Into<String>,
    ) -> Result<Self, DataError> {
        if x.rows() != y.len() {
            return Err(DataError::RowMismatch {
                x_rows: x.rows(),
                y_rows: y.len(),
            });
        }
        if feature_names.len() != x.cols() {
            return Err(DataError::DimensionMismatch {
                expected: x.cols(),
                got: feature_names.len(),
            });
        }
        Ok(Self {
            x,
            y,
            feature_names,
            target_name: target_name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
        }
    }

    /// Same features with every outcome multiplied by `factor`.
    pub fn scale_y(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.y.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Writes the features then the target as CSV with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let file = File::create(path).map_err(|e| DataError::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut header = self.feature_names.clone();
        header.push(self.target_name.clone());
        let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
            writeln!(out, "{}", header.join(","))?;
            for i in 0..self.len() {
                for v in self.x.row_slice(i) {
                    write!(out, "{v},")?;
                }
                writeln!(out, "{}", self.y[i])?;
            }
            out.flush()
        };
        write(&mut out).map_err(|e| DataError::io(path, e))
    }
}

/// Reads a headed, comma-separated numeric file. Every column except the
/// target becomes a feature.
pub fn load_csv(path: &Path, target: &TargetColumn) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    let target_idx = match target {
        TargetColumn::Last => header.len() - 1,
        TargetColumn::Named(name) => {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingColumn {
                    column: name.clone(),
                    available: header.join(", "),
                })?
        }
    };

    let mut x = Vec::new();
    let mut y = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                line,
                column: header[j].clone(),
                value: cell.to_string(),
            })?;
            if !value.is_finite() {
                return Err(DataError::NonFinite {
                    line,
                    column: header[j].clone(),
                });
            }
            if j == target_idx {
                y.push(value);
            } else {
                x.push(value);
            }
        }
    }
    let p = header.len() - 1;
    let feature_names = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let x = Tensor::new(y.len(), p, x).expect("row lengths checked by the csv reader");
    Dataset::new(x, y, feature_names, header[target_idx].clone())
}

fn csv_error(path: &Path, e: csv::Error) -> DataError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::io(path, source),
        kind => DataError::Csv {
            path: path.to_path_buf(),
            message: format!("{kind:?}"),
        },
    }
}
