//! Maximum-likelihood fitting with Adam.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Parameter, Tensor};
use crate::data::Dataset;
use crate::flow::{batch_log_density, DensityModel, FlowError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid training configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite log-density {value} at sample {index}")]
    NonFiniteSample { index: usize, value: f64 },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("gradient for `{id}` has shape {got:?}, parameter has {expected:?}")]
    GradientShape {
        id: String,
        expected: [usize; 2],
        got: [usize; 2],
    },
    #[error("training diverged: {0}")]
    Diverged(Box<DivergenceSnapshot>),
    #[error("writing training log: {0}")]
    Log(#[from] std::io::Error),
}

/// State at the point training was abandoned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSnapshot {
    pub iteration: usize,
    pub learning_rate: f64,
    pub last_finite_train_nll: Option<f64>,
    pub last_finite_iteration: Option<usize>,
    /// Most recent loss error, typically naming an offending sample.
    pub last_error: Option<String>,
}

impl std::fmt::Display for DivergenceSnapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "non-finite training loss for 10 consecutive logs at iteration {} (lr {})",
            self.iteration, self.learning_rate
        )?;
        if let (Some(it), Some(v)) = (self.last_finite_iteration, self.last_finite_train_nll) {
            write!(f, "; last finite train NLL {v} at iteration {it}")?;
        }
        if let Some(e) = &self.last_error {
            write!(f, "; {e}")?;
        }
        Ok(())
    }
}

/// Minibatch size: an explicit count, the whole training set, or `auto`
/// (whole set up to 2000 rows, 256 above).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BatchRepr", into = "BatchRepr")]
pub enum BatchSize {
    #[default]
    Auto,
    Full,
    Rows(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BatchRepr {
    Rows(usize),
    Named(String),
}

impl TryFrom<BatchRepr> for BatchSize {
    type Error = String;

    fn try_from(r: BatchRepr) -> Result<Self, String> {
        match r {
            BatchRepr::Rows(n) => Ok(Self::Rows(n)),
            BatchRepr::Named(s) if s.eq_ignore_ascii_case("auto") => Ok(Self::Auto),
            BatchRepr::Named(s) if s.eq_ignore_ascii_case("full") => Ok(Self::Full),
            BatchRepr::Named(s) => Err(format!(
                "batch_size `{s}`: expected a count, \"full\" or \"auto\""
            )),
        }
    }
}

impl From<BatchSize> for BatchRepr {
    fn from(b: BatchSize) -> Self {
        match b {
            BatchSize::Auto => Self::Named("auto".into()),
            BatchSize::Full => Self::Named("full".into()),
            BatchSize::Rows(n) => Self::Rows(n),
        }
    }
}

impl BatchSize {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            Self::Auto if n <= 2000 => n,
            Self::Auto => 256,
            Self::Full => n,
            Self::Rows(k) => k.min(n),
        }
    }
}

/// Datasets smaller than this get the default L2 penalty.
pub const AUTO_L2_ROWS: usize = 1500;
pub const AUTO_L2: f64 = 0.01;

/// Default penalty for a dataset of `n` rows.
pub fn auto_l2(n: usize) -> f64 {
    if n < AUTO_L2_ROWS {
        AUTO_L2
    } else {
        0.0
    }
}

fn default_lr() -> f64 {
    1e-2
}
fn default_iterations() -> usize {
    20_000
}
fn default_log_every() -> usize {
    100
}
fn default_halve_at() -> Option<f64> {
    Some(0.7)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub batch_size: BatchSize,
    /// Weight-matrix penalty; `None` applies [`auto_l2`] to the dataset size.
    #[serde(default)]
    pub l2: Option<f64>,
    #[serde(default)]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Fraction of the budget after which the learning rate is halved once.
    #[serde(default = "default_halve_at")]
    pub halve_lr_at: Option<f64>,
    /// Benchmark protocol: with `val_fraction > 0`, pick the iteration count
    /// with the lowest validation NLL, then retrain from scratch on the whole
    /// training fold for that many iterations.
    #[serde(default)]
    pub refit_on_full: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            iterations: default_iterations(),
            batch_size: BatchSize::Auto,
            l2: None,
            val_fraction: 0.0,
            seed: 0,
            log_every: default_log_every(),
            halve_lr_at: default_halve_at(),
            refit_on_full: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            problems.push(format!(
                "train.val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            ));
        }
        if self.log_every == 0 {
            problems.push("train.log_every must be positive".into());
        }
        if self.batch_size == BatchSize::Rows(0) {
            problems.push("train.batch_size must be positive".into());
        }
        if let Some(l2) = self.l2 {
            if !(l2 >= 0.0 && l2.is_finite()) {
                problems.push(format!("train.l2 must be non-negative, got {l2}"));
            }
        }
        if self.refit_on_full && self.val_fraction == 0.0 {
            problems.push("train.refit_on_full needs train.val_fraction > 0".into());
        }
        if let Some(h) = self.halve_lr_at {
            if !(0.0..=1.0).contains(&h) {
                problems.push(format!("train.halve_lr_at must lie in [0, 1], got {h}"));
            }
        }
        problems
    }

    /// Settings for retraining on the whole fold for `iterations` steps while
    /// keeping the learning-rate schedule of `self` in absolute terms.
    pub fn refit(&self, iterations: usize) -> Self {
        let halve_lr_at = self.halve_lr_at.and_then(|h| {
            let at = h * self.iterations as f64;
            (iterations > 0 && at <= iterations as f64).then(|| at / iterations as f64)
        });
        Self {
            iterations,
            val_fraction: 0.0,
            halve_lr_at,
            refit_on_full: false,
            ..self.clone()
        }
    }

    /// Learning rate in effect at `iteration`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        match self.halve_lr_at {
            Some(h) if iteration as f64 >= h * self.iterations as f64 => 0.5 * self.learning_rate,
            _ => self.learning_rate,
        }
    }
}

/// Loss value split into its parts, with gradients per parameter id.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub nll: f64,
    pub penalty: f64,
    pub gradients: BTreeMap<String, Tensor>,
}

/// `-(1/n) sum log f(y_i | x_i) + l2 * sum ||W||^2` over the model's weight
/// matrices.
pub fn nll_loss(
    model: &dyn DensityModel,
    x: &Tensor,
    y: &[f64],
    l2: f64,
) -> Result<f64, TrainError> {
    if y.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let ld = batch_log_density(model, x, y)?;
    check_rows(&ld)?;
    let nll = -ld.iter().sum::<f64>() / ld.len() as f64;
    let loss = nll + l2 * penalty(model);
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss(loss));
    }
    Ok(loss)
}

/// Sum of squared entries of the penalized weight matrices.
pub fn penalty(model: &dyn DensityModel) -> f64 {
    let ids = model.penalized();
    model
        .parameters()
        .into_iter()
        .filter(|p| ids.contains(&p.id))
        .map(|p| p.tensor.squared_norm())
        .sum()
}

/// Loss and its gradient through the autodiff graph.
pub fn loss_and_gradients(
    model: &dyn DensityModel,
    x: &Tensor,
    y: &[f64],
    l2: f64,
) -> Result<LossEval, TrainError> {
    if y.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut g = Graph::new();
    let nodes = model.log_density_nodes(&mut g, x, y)?;
    check_rows(g.value(nodes.log_density).data())?;
    let mean = g.mean(nodes.log_density)?;
    let mut loss = g.neg(mean)?;
    let nll = g.value(loss).item().expect("scalar");
    let mut pen = 0.0;
    if l2 > 0.0 {
        for id in model.penalized() {
            if let Some(&w) = nodes.params.get(&id) {
                pen += g.value(w).squared_norm();
                let sq = g.square(w)?;
                let s = g.sum(sq)?;
                let term = g.scale(s, l2)?;
                loss = g.add(loss, term)?;
            }
        }
    }
    let value = g.value(loss).item().expect("scalar");
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss(value));
    }
    let gradients = g.backward(loss)?.into_params();
    Ok(LossEval {
        loss: value,
        nll,
        penalty: pen,
        gradients,
    })
}

fn check_rows(ld: &[f64]) -> Result<(), TrainError> {
    match ld.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TrainError::NonFiniteSample {
            index,
            value: ld[index],
        }),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left untouched.
pub fn adam_step(
    params: &mut [&mut Parameter],
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    for p in params.iter() {
        if let Some(g) = grads.get(&p.id) {
            if g.shape() != p.tensor.shape() {
                return Err(TrainError::GradientShape {
                    id: p.id.clone(),
                    expected: p.tensor.shape(),
                    got: g.shape(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for p in params.iter_mut() {
        let Some(g) = grads.get(&p.id) else { continue };
        let shape = p.tensor.shape();
        let m = state
            .m
            .entry(p.id.clone())
            .or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
        let v = state
            .v
            .entry(p.id.clone())
            .or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
        let w = p.tensor.data_mut();
        for (((w, m), v), &g) in w
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub nll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Mean training NLL (without penalty) at each logged iteration.
    pub train_trace: Vec<TracePoint>,
    pub val_trace: Vec<TracePoint>,
    pub best_val_iteration: Option<usize>,
    pub final_train_nll: f64,
    pub l2: f64,
    pub batch_size: usize,
    /// Steps whose loss was non-finite and therefore not applied.
    pub skipped_steps: usize,
}

#[derive(Serialize)]
struct LogRecord {
    iteration: usize,
    train_nll: f64,
    val_nll: Option<f64>,
}

pub fn fit(
    model: &mut dyn DensityModel,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<FitResult, TrainError> {
    fit_logged(model, data, config, None)
}

/// Trains `model` in place on already-scaled `data`. When `log` is given,
/// one JSON record `{iteration, train_nll, val_nll}` is written per line at
/// every logged iteration.
pub fn fit_logged(
    model: &mut dyn DensityModel,
    data: &Dataset,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FitResult, TrainError> {
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(TrainError::InvalidConfig(problems));
    }
    if data.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train, val) = if config.val_fraction > 0.0 {
        let mut perm: Vec<usize> = (0..data.len()).collect();
        perm.shuffle(&mut rng);
        let n_val =
            ((config.val_fraction * data.len() as f64).round() as usize).min(data.len() - 1);
        let (v, t) = perm.split_at(n_val);
        (data.select(t), (n_val > 0).then(|| data.select(v)))
    } else {
        (data.clone(), None)
    };
    let l2 = config.l2.unwrap_or_else(|| auto_l2(data.len()));
    let batch = config.batch_size.resolve(train.len());
    let full_batch = batch == train.len();
    let adam = AdamConfig::default();
    let mut state = AdamState::default();

    let mut result = FitResult {
        train_trace: Vec::new(),
        val_trace: Vec::new(),
        best_val_iteration: None,
        final_train_nll: f64::NAN,
        l2,
        batch_size: batch,
        skipped_steps: 0,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = train.len();
    let mut bad_logs = 0;
    let mut last_error: Option<String> = None;
    let mut best_val = f64::INFINITY;

    for it in 0..=config.iterations {
        let logging = it % config.log_every == 0 || it == config.iterations;
        let step = if it < config.iterations {
            let (bx, by);
            let (x, y) = if full_batch {
                (&train.x, &train.y[..])
            } else {
                if cursor + batch > order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let idx = &order[cursor..cursor + batch];
                cursor += batch;
                bx = train.x.select_rows(idx);
                by = idx.iter().map(|&i| train.y[i]).collect::<Vec<_>>();
                (&bx, &by[..])
            };
            Some(loss_and_gradients(&*model, x, y, l2))
        } else {
            None
        };

        if logging {
            let train_nll = match (&step, full_batch) {
                (Some(Ok(eval)), true) => eval.nll,
                (Some(Err(_)), true) => f64::NAN,
                _ => mean_nll(&*model, &train),
            };
            let val_nll = val.as_ref().map(|v| mean_nll(&*model, v));
            if train_nll.is_finite() {
                bad_logs = 0;
            } else {
                bad_logs += 1;
                if bad_logs >= 10 {
                    let last = result.train_trace.iter().rev().find(|p| p.nll.is_finite());
                    return Err(TrainError::Diverged(Box::new(DivergenceSnapshot {
                        iteration: it,
                        learning_rate: config.learning_rate_at(it),
                        last_finite_train_nll: last.map(|p| p.nll),
                        last_finite_iteration: last.map(|p| p.iteration),
                        last_error,
                    })));
                }
            }
            result.train_trace.push(TracePoint {
                iteration: it,
                nll: train_nll,
            });
            if let Some(v) = val_nll {
                result.val_trace.push(TracePoint {
                    iteration: it,
                    nll: v,
                });
                if v < best_val {
                    best_val = v;
                    result.best_val_iteration = Some(it);
                }
            }
            if let Some(out) = log.as_deref_mut() {
                let record = LogRecord {
                    iteration: it,
                    train_nll,
                    val_nll,
                };
                serde_json::to_writer(&mut *out, &record).map_err(std::io::Error::from)?;
                writeln!(out)?;
            }
            result.final_train_nll = train_nll;
        }

        match step {
            Some(Ok(eval)) => {
                let mut params = model.parameters_mut();
                adam_step(
                    &mut params,
                    &eval.gradients,
                    &mut state,
                    config.learning_rate_at(it),
                    &adam,
                )?;
            }
            Some(Err(e)) => {
                result.skipped_steps += 1;
                last_error = Some(e.to_string());
                log::debug!("iteration {it}: step skipped: {e}");
            }
            None => {}
        }
    }
    if let Some(out) = log {
        out.flush()?;
    }
    Ok(result)
}

/// Mean negative log-density over `data`; NaN if any row is non-finite.
pub fn mean_nll(model: &dyn DensityModel, data: &Dataset) -> f64 {
    match batch_log_density(model, &data.x, &data.y) {
        Ok(ld) => -ld.iter().sum::<f64>() / ld.len() as f64,
        Err(_) => f64::NAN,
    }
}
