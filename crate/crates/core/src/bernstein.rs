//! Bernstein basis on `[0, 1]`, polynomial evaluation and derivatives, and the
//! construction of strictly increasing coefficient vectors.
//!
//! The basis functions are the Beta densities `Be_i = Beta(i + 1, M - i + 1)`,
//! i.e. `(M + 1) * C(M, i) * t^i * (1 - t)^(M - i)`. A polynomial with
//! coefficients `theta` is `sum_i Be_i(t) * theta_i / (M + 1)`, which is the
//! standard Bernstein form `sum_i theta_i * b_{i,M}(t)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, AutodiffError, CustomOp, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BernsteinError {
    #[error("Bernstein order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("argument {0} outside [0, 1]")]
    Domain(f64),
    #[error("non-finite unconstrained coefficient at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },
    #[error("coefficients not strictly increasing at index {index}")]
    NotIncreasing { index: usize },
    #[error("expected {expected} coefficients, got {got}")]
    WrongLength { expected: usize, got: usize },
}

/// Precomputed binomial tables for one order `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct BernsteinBasis {
    order: usize,
    /// `ln C(M, i)`, `M + 1` entries.
    log_binom: Vec<f64>,
    /// `C(d, i)` for `d = M, M - 1, M - 2` (missing degrees are empty).
    binom: [Vec<f64>; 3],
}

fn log_binomial_row(degree: usize, ln_fact: &[f64]) -> Vec<f64> {
    (0..=degree)
        .map(|i| ln_fact[degree] - ln_fact[i] - ln_fact[degree - i])
        .collect()
}

impl BernsteinBasis {
    pub fn new(order: usize) -> Result<Self, BernsteinError> {
        if order == 0 {
            return Err(BernsteinError::InvalidOrder(order));
        }
        let mut ln_fact = vec![0.0; order + 1];
        for k in 1..=order {
            ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
        }
        let log_binom = log_binomial_row(order, &ln_fact);
        let row = |d: Option<usize>| -> Vec<f64> {
            d.map(|d| {
                log_binomial_row(d, &ln_fact)
                    .into_iter()
                    .map(|l| l.exp().round())
                    .collect()
            })
            .unwrap_or_default()
        };
        let binom = [
            row(Some(order)),
            row(order.checked_sub(1)),
            row(order.checked_sub(2)),
        ];
        Ok(Self {
            order,
            log_binom,
            binom,
        })
    }

    /// Shared instance for `order`, built once per process.
    pub fn cached(order: usize) -> Result<Arc<Self>, BernsteinError> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<BernsteinBasis>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(b) = map.get(&order) {
            return Ok(Arc::clone(b));
        }
        let basis = Arc::new(Self::new(order)?);
        map.insert(order, Arc::clone(&basis));
        Ok(basis)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn log_binomials(&self) -> &[f64] {
        &self.log_binom
    }

    /// Density-normalized basis `Be_0(t) .. Be_M(t)`.
    pub fn basis_eval(&self, t: f64) -> Result<Vec<f64>, BernsteinError> {
        check_unit(t)?;
        let powers = Powers::new(self.order, t, 1.0 - t);
        let scale = (self.order + 1) as f64;
        Ok((0..=self.order)
            .map(|i| scale * self.standard(&powers, 0, i))
            .collect())
    }

    pub fn poly_eval(&self, coeffs: &MonotoneCoefficients, t: f64) -> Result<f64, BernsteinError> {
        self.check_len(coeffs)?;
        check_unit(t)?;
        Ok(self.eval_parts(coeffs.as_slice(), t, 1.0 - t).value)
    }

    /// Derivative with respect to `t` via degree reduction.
    pub fn poly_deriv(&self, coeffs: &MonotoneCoefficients, t: f64) -> Result<f64, BernsteinError> {
        self.check_len(coeffs)?;
        check_unit(t)?;
        Ok(self.eval_parts(coeffs.as_slice(), t, 1.0 - t).slope)
    }

    fn check_len(&self, coeffs: &MonotoneCoefficients) -> Result<(), BernsteinError> {
        if coeffs.len() != self.order + 1 {
            return Err(BernsteinError::WrongLength {
                expected: self.order + 1,
                got: coeffs.len(),
            });
        }
        Ok(())
    }

    /// `b_{i,d}(t)` with `d = M - reduction`; `t^i (1-t)^(d-i)` from `powers`.
    fn standard(&self, powers: &Powers, reduction: usize, i: usize) -> f64 {
        let degree = self.order - reduction;
        self.binom[reduction][i] * powers.t[i] * powers.s[degree - i]
    }

    /// Value, first and second `t`-derivative of the polynomial at `t`, with
    /// `s = 1 - t` supplied separately so callers can keep full precision
    /// near `t = 1`.
    pub(crate) fn eval_parts(&self, theta: &[f64], t: f64, s: f64) -> PolyParts {
        let m = self.order;
        let powers = Powers::new(m, t, s);
        let mut value = 0.0;
        for (i, th) in theta.iter().enumerate() {
            value += th * self.standard(&powers, 0, i);
        }
        let mut slope = 0.0;
        for i in 0..m {
            slope += (theta[i + 1] - theta[i]) * self.standard(&powers, 1, i);
        }
        slope *= m as f64;
        let mut curvature = 0.0;
        if m >= 2 {
            for i in 0..m - 1 {
                curvature +=
                    (theta[i + 2] - 2.0 * theta[i + 1] + theta[i]) * self.standard(&powers, 2, i);
            }
            curvature *= (m * (m - 1)) as f64;
        }
        PolyParts {
            value,
            slope,
            curvature,
        }
    }
}

pub(crate) struct PolyParts {
    pub value: f64,
    pub slope: f64,
    pub curvature: f64,
}

/// `t^k` and `s^k` for `k = 0..=M`. Built by repeated multiplication from
/// `1`, so `t = 0` or `s = 0` collapse exactly onto the boundary basis
/// function without evaluating `0^0`.
struct Powers {
    t: Vec<f64>,
    s: Vec<f64>,
}

impl Powers {
    fn new(m: usize, t: f64, s: f64) -> Self {
        let mut pt = Vec::with_capacity(m + 1);
        let mut ps = Vec::with_capacity(m + 1);
        let (mut a, mut b) = (1.0, 1.0);
        for _ in 0..=m {
            pt.push(a);
            ps.push(b);
            a *= t;
            b *= s;
        }
        Self { t: pt, s: ps }
    }
}

fn check_unit(t: f64) -> Result<(), BernsteinError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(BernsteinError::Domain(t))
    }
}

/// Strictly increasing coefficient vector `theta_0 < ... < theta_M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MonotoneCoefficients {
    theta: Vec<f64>,
}

impl MonotoneCoefficients {
    pub fn new(theta: Vec<f64>) -> Result<Self, BernsteinError> {
        if theta.len() < 2 {
            return Err(BernsteinError::InvalidOrder(theta.len().saturating_sub(1)));
        }
        for (index, v) in theta.iter().enumerate() {
            if !v.is_finite() {
                return Err(BernsteinError::NonFinite { index, value: *v });
            }
        }
        if let Some(k) = (1..theta.len()).find(|&k| theta[k] <= theta[k - 1]) {
            return Err(BernsteinError::NotIncreasing { index: k });
        }
        Ok(Self { theta })
    }

    pub fn order(&self) -> usize {
        self.theta.len() - 1
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn first(&self) -> f64 {
        self.theta[0]
    }

    pub fn last(&self) -> f64 {
        self.theta[self.theta.len() - 1]
    }
}

impl TryFrom<Vec<f64>> for MonotoneCoefficients {
    type Error = BernsteinError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<MonotoneCoefficients> for Vec<f64> {
    fn from(c: MonotoneCoefficients) -> Self {
        c.theta
    }
}

/// `theta_0 = gamma_0`, `theta_k = theta_{k-1} + exp(gamma_k)`.
pub fn monotone_from_unconstrained(gamma: &[f64]) -> Result<MonotoneCoefficients, BernsteinError> {
    for (index, g) in gamma.iter().enumerate() {
        if !g.is_finite() {
            return Err(BernsteinError::NonFinite { index, value: *g });
        }
    }
    let mut theta = Vec::with_capacity(gamma.len());
    let mut acc = 0.0;
    for (k, g) in gamma.iter().enumerate() {
        acc = if k == 0 { *g } else { acc + g.exp() };
        theta.push(acc);
    }
    MonotoneCoefficients::new(theta)
}

pub fn basis_eval(order: usize, t: f64) -> Result<Vec<f64>, BernsteinError> {
    BernsteinBasis::cached(order)?.basis_eval(t)
}

pub fn poly_eval(coeffs: &MonotoneCoefficients, t: f64) -> Result<f64, BernsteinError> {
    BernsteinBasis::cached(coeffs.order())?.poly_eval(coeffs, t)
}

pub fn poly_deriv(coeffs: &MonotoneCoefficients, t: f64) -> Result<f64, BernsteinError> {
    BernsteinBasis::cached(coeffs.order())?.poly_deriv(coeffs, t)
}

/// Which quantity [`SigmoidBernsteinOp`] emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BernsteinOutput {
    /// `h(sigmoid(u))`
    Value,
    /// `h'(t)` at `t = sigmoid(u)`, derivative taken in `t`.
    Slope,
}

/// Graph operation over inputs `[u (n x 1), theta (n x (M+1))]` that
/// evaluates the row-wise Bernstein polynomial (or its `t`-derivative) at
/// `t = sigmoid(u)`. Fusing the sigmoid keeps `1 - t` exact for large `u`.
#[derive(Debug)]
pub struct SigmoidBernsteinOp {
    basis: Arc<BernsteinBasis>,
    output: BernsteinOutput,
}

impl SigmoidBernsteinOp {
    pub fn new(basis: Arc<BernsteinBasis>, output: BernsteinOutput) -> Self {
        Self { basis, output }
    }

    fn check(&self, inputs: &[&Tensor]) -> Result<(), AutodiffError> {
        let (u, theta) = (inputs[0], inputs[1]);
        if u.cols() != 1 || theta.rows() != u.rows() || theta.cols() != self.basis.order + 1 {
            return Err(AutodiffError::ShapeMismatch {
                node: None,
                op: self.name(),
                left: u.shape(),
                right: theta.shape(),
            });
        }
        Ok(())
    }
}

impl CustomOp for SigmoidBernsteinOp {
    fn name(&self) -> &'static str {
        match self.output {
            BernsteinOutput::Value => "sigmoid_bernstein",
            BernsteinOutput::Slope => "sigmoid_bernstein_slope",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        self.check(inputs)?;
        let (u, theta) = (inputs[0], inputs[1]);
        let out: Vec<f64> = (0..u.rows())
            .map(|r| {
                let x = u.data()[r];
                let parts = self
                    .basis
                    .eval_parts(theta.row_slice(r), sigmoid(x), sigmoid(-x));
                match self.output {
                    BernsteinOutput::Value => parts.value,
                    BernsteinOutput::Slope => parts.slope,
                }
            })
            .collect();
        Ok(Tensor::column(&out))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (u, theta) = (inputs[0], inputs[1]);
        let m = self.basis.order;
        let mut grad_u = vec![0.0; u.rows()];
        let mut grad_theta = vec![0.0; theta.len()];
        for r in 0..u.rows() {
            let g = grad.data()[r];
            let x = u.data()[r];
            let (t, s) = (sigmoid(x), sigmoid(-x));
            let row = theta.row_slice(r);
            let parts = self.basis.eval_parts(row, t, s);
            let powers = Powers::new(m, t, s);
            let dst = &mut grad_theta[r * (m + 1)..(r + 1) * (m + 1)];
            match self.output {
                BernsteinOutput::Value => {
                    grad_u[r] = g * parts.slope * t * s;
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = g * self.basis.standard(&powers, 0, i);
                    }
                }
                BernsteinOutput::Slope => {
                    grad_u[r] = g * parts.curvature * t * s;
                    for (j, d) in dst.iter_mut().enumerate() {
                        let left = if j > 0 {
                            self.basis.standard(&powers, 1, j - 1)
                        } else {
                            0.0
                        };
                        let right = if j < m {
                            self.basis.standard(&powers, 1, j)
                        } else {
                            0.0
                        };
                        *d = g * m as f64 * (left - right);
                    }
                }
            }
        }
        vec![
            Tensor::column(&grad_u),
            Tensor::new(theta.rows(), theta.cols(), grad_theta).expect("theta grad shape"),
        ]
    }
}
