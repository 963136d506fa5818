//! Original-scale scoring, CPD export and the multi-fold benchmark.

mod benchmark;
mod cpd;

use thiserror::Error;

use crate::data::{nll_scale_correction, DataError, Dataset, Scaler};
use crate::flow::{batch_log_density, DensityModel, FlowError};
use crate::training::TrainError;

pub use benchmark::{
    benchmark_run, evaluate_folds, mean_and_std_error, BenchmarkReport, FoldOutcome,
};
pub use cpd::{cpd_export, CpdGrid, GridSpec, QuantileEntry, DEFAULT_GRID_POINTS, TAIL_LEVEL};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("non-finite log-density at test row {index}")]
    NonFiniteRow { index: usize },
    #[error("fold split covers {folds} rows but the dataset has {rows}")]
    FoldMismatch { folds: usize, rows: usize },
    #[error("grid needs at least 2 points, got {0}")]
    GridPoints(usize),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Mean NLL of raw-scale `test` rows, reported on the original outcome scale:
/// the model's scaled-space NLL plus `ln s_y`.
pub fn test_nll(
    model: &dyn DensityModel,
    scaler: &Scaler,
    test: &Dataset,
) -> Result<f64, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let scaled = scaler.apply(test)?;
    let ld = batch_log_density(model, &scaled.x, &scaled.y)?;
    if let Some(index) = ld.iter().position(|v| !v.is_finite()) {
        return Err(EvalError::NonFiniteRow { index });
    }
    let nll = -ld.iter().sum::<f64>() / ld.len() as f64;
    Ok(nll + nll_scale_correction(scaler))
}
