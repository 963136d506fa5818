use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{test_nll, EvalError};
use crate::data::{Dataset, FoldSource, FoldSplit, Scaler};
use crate::flow::{AnyModel, ModelConfig};
use crate::training::{auto_l2, fit, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    /// Original-scale test NLL; absent when the fold failed.
    pub test_nll: Option<f64>,
    /// Scaled-space training NLL at the end of fitting.
    pub final_train_nll: Option<f64>,
    /// Iteration count chosen on the validation split, when refitting.
    pub selected_iterations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub dataset: String,
    pub n_rows: usize,
    pub n_features: usize,
    pub fold_source: FoldSource,
    pub folds: Vec<FoldOutcome>,
    pub n_failed: usize,
    /// Mean test NLL over successful folds.
    pub mean_test_nll: Option<f64>,
    /// Sample standard deviation over successful folds divided by the square
    /// root of their count; 0 for a single fold.
    pub std_error: Option<f64>,
    pub model_config: ModelConfig,
    /// Training settings with the penalty resolved; absent for evaluation of
    /// an already trained model.
    pub train_config: Option<TrainConfig>,
}

/// Two-pass mean and standard error of the mean.
pub fn mean_and_std_error(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Some((mean, (var / k).sqrt()))
}

/// Trains one fresh model per fold and scores it on the held-out rows.
///
/// Fold `k` uses `seed + k` for both initialization and training. A fold
/// that fails is recorded with its error and excluded from the aggregate.
pub fn benchmark_run(
    name: &str,
    data: &Dataset,
    folds: &FoldSplit,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    jobs: usize,
) -> Result<BenchmarkReport, EvalError> {
    if folds.n != data.len() {
        return Err(EvalError::FoldMismatch {
            folds: folds.n,
            rows: data.len(),
        });
    }
    let train_config = TrainConfig {
        l2: Some(train_config.l2.unwrap_or_else(|| auto_l2(data.len()))),
        ..train_config.clone()
    };
    let run_fold = |k: usize| {
        let fold = &folds.folds[k];
        let mut outcome = FoldOutcome {
            fold: k,
            train_rows: fold.train.len(),
            test_rows: fold.test.len(),
            test_nll: None,
            final_train_nll: None,
            selected_iterations: None,
            error: None,
        };
        let mc = ModelConfig {
            seed: model_config.seed.wrapping_add(k as u64),
            ..model_config.clone()
        };
        let tc = TrainConfig {
            seed: train_config.seed.wrapping_add(k as u64),
            ..train_config.clone()
        };
        let result = (|| -> Result<(f64, f64, Option<usize>), EvalError> {
            let train = data.select(&fold.train);
            let test = data.select(&fold.test);
            let scaler = Scaler::fit(&train)?;
            let scaled = scaler.apply(&train)?;
            let (tc, selected) = if tc.refit_on_full {
                let mut probe = AnyModel::new(mc.clone(), data.n_features())?;
                let best = fit(&mut probe, &scaled, &tc)?
                    .best_val_iteration
                    .unwrap_or(tc.iterations);
                (tc.refit(best), Some(best))
            } else {
                (tc, None)
            };
            let mut model = AnyModel::new(mc, data.n_features())?;
            let fitted = fit(&mut model, &scaled, &tc)?;
            Ok((
                fitted.final_train_nll,
                test_nll(&model, &scaler, &test)?,
                selected,
            ))
        })();
        match result {
            Ok((train_nll, nll, selected)) => {
                outcome.final_train_nll = Some(train_nll);
                outcome.test_nll = Some(nll);
                outcome.selected_iterations = selected;
            }
            Err(e) => {
                log::error!("{name}: fold {k} failed: {e}");
                outcome.error = Some(e.to_string());
            }
        }
        outcome
    };

    let outcomes: Vec<FoldOutcome> = if jobs <= 1 {
        (0..folds.len()).map(run_fold).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| (0..folds.len()).into_par_iter().map(run_fold).collect())
    };
    Ok(assemble(
        name,
        data,
        folds,
        outcomes,
        model_config.clone(),
        Some(train_config),
    ))
}

/// Scores one trained model on the test rows of every fold.
pub fn evaluate_folds(
    name: &str,
    model: &AnyModel,
    scaler: &Scaler,
    data: &Dataset,
    folds: &FoldSplit,
) -> Result<BenchmarkReport, EvalError> {
    if folds.n != data.len() {
        return Err(EvalError::FoldMismatch {
            folds: folds.n,
            rows: data.len(),
        });
    }
    let outcomes = folds
        .folds
        .iter()
        .enumerate()
        .map(|(k, fold)| {
            let scored = test_nll(model, scaler, &data.select(&fold.test));
            FoldOutcome {
                fold: k,
                train_rows: fold.train.len(),
                test_rows: fold.test.len(),
                test_nll: scored.as_ref().ok().copied(),
                final_train_nll: None,
                selected_iterations: None,
                error: scored.err().map(|e| e.to_string()),
            }
        })
        .collect();
    Ok(assemble(
        name,
        data,
        folds,
        outcomes,
        model.config().clone(),
        None,
    ))
}

fn assemble(
    name: &str,
    data: &Dataset,
    folds: &FoldSplit,
    outcomes: Vec<FoldOutcome>,
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
) -> BenchmarkReport {
    let scores: Vec<f64> = outcomes.iter().filter_map(|o| o.test_nll).collect();
    let n_failed = outcomes.len() - scores.len();
    if n_failed > 0 {
        log::warn!(
            "{name}: {n_failed} of {} folds failed and are excluded",
            outcomes.len()
        );
    }
    let stats = mean_and_std_error(&scores);
    BenchmarkReport {
        dataset: name.to_string(),
        n_rows: data.len(),
        n_features: data.n_features(),
        fold_source: folds.source.clone(),
        folds: outcomes,
        n_failed,
        mean_test_nll: stats.map(|s| s.0),
        std_error: stats.map(|s| s.1),
        model_config,
        train_config,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregation_matches_one_pass_formula() {
        let values = [2.41, 2.38, 2.52, 2.47, 2.35];
        let (mean, se) = mean_and_std_error(&values).unwrap();
        // Welford's one-pass recurrence as an independent oracle
        let (mut n, mut m, mut s) = (0.0, 0.0, 0.0);
        for &v in &values {
            n += 1.0;
            let d = v - m;
            m += d / n;
            s += d * (v - m);
        }
        assert!((mean - m).abs() < 1e-12);
        assert!((se - (s / (n - 1.0) / n).sqrt()).abs() < 1e-12);
        assert_eq!(mean_and_std_error(&[1.5]), Some((1.5, 0.0)));
        assert_eq!(mean_and_std_error(&[]), None);
    }
}
