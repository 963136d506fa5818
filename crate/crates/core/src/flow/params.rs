use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BaseDistribution, FlowError};
use crate::autodiff::{sigmoid, softplus};
use crate::bernstein::{BernsteinBasis, MonotoneCoefficients};

/// Lower bound applied to the Bernstein slope before taking its log.
pub const SLOPE_FLOOR: f64 = 1e-30;

static FLOORED_SLOPES: AtomicU64 = AtomicU64::new(0);

/// Number of density evaluations (scalar or batched) that hit [`SLOPE_FLOOR`]
/// since process start.
pub fn floored_slope_count() -> u64 {
    FLOORED_SLOPES.load(Ordering::Relaxed)
}

pub(crate) fn record_floored_slopes(n: u64) {
    if n > 0 {
        FLOORED_SLOPES.fetch_add(n, Ordering::Relaxed);
    }
}

/// Parameters of one conditional transformation
/// `z = alpha * h_theta(sigmoid(a * y - b)) - beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub a: f64,
    pub b: f64,
    pub theta: MonotoneCoefficients,
    pub alpha: f64,
    pub beta: f64,
}

impl TransformParams {
    pub fn new(
        a: f64,
        b: f64,
        theta: MonotoneCoefficients,
        alpha: f64,
        beta: f64,
    ) -> Result<Self, FlowError> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(FlowError::InvalidParams(format!(
                "scale a = {a} must be positive"
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(FlowError::InvalidParams(format!(
                "scale alpha = {alpha} must be positive"
            )));
        }
        if !b.is_finite() || !beta.is_finite() {
            return Err(FlowError::InvalidParams(format!(
                "shifts must be finite (b = {b}, beta = {beta})"
            )));
        }
        Ok(Self {
            a,
            b,
            theta,
            alpha,
            beta,
        })
    }

    /// Open interval of attainable `z` values, `(alpha*theta_0 - beta, alpha*theta_M - beta)`.
    pub fn z_range(&self) -> (f64, f64) {
        (
            self.alpha * self.theta.first() - self.beta,
            self.alpha * self.theta.last() - self.beta,
        )
    }

    fn basis(&self) -> std::sync::Arc<BernsteinBasis> {
        BernsteinBasis::cached(self.theta.order()).expect("order >= 1 by construction")
    }
}

pub fn transform(p: &TransformParams, y: f64) -> f64 {
    let u = p.a * y - p.b;
    let parts = p
        .basis()
        .eval_parts(p.theta.as_slice(), sigmoid(u), sigmoid(-u));
    p.alpha * parts.value - p.beta
}

/// Exact log-density of `y` under the change of variables through the flow.
pub fn log_density(p: &TransformParams, y: f64, base: BaseDistribution) -> Result<f64, FlowError> {
    let u = p.a * y - p.b;
    let parts = p
        .basis()
        .eval_parts(p.theta.as_slice(), sigmoid(u), sigmoid(-u));
    let z = p.alpha * parts.value - p.beta;
    let slope = if parts.slope < SLOPE_FLOOR {
        record_floored_slopes(1);
        SLOPE_FLOOR
    } else {
        parts.slope
    };
    let terms = [
        ("log base density", base.log_pdf(z)),
        ("log alpha", p.alpha.ln()),
        ("log bernstein slope", slope.ln()),
        ("log sigmoid slope", -softplus(u) - softplus(-u)),
        ("log a", p.a.ln()),
    ];
    let mut total = 0.0;
    for (term, value) in terms {
        if !value.is_finite() {
            return Err(FlowError::NonFinite { term, value });
        }
        total += value;
    }
    Ok(total)
}

pub fn cdf(p: &TransformParams, y: f64, base: BaseDistribution) -> f64 {
    base.cdf(transform(p, y))
}

/// Solves `transform(p, y) = z` by bracketing outward from `hint` and then
/// bisecting.
pub fn invert(p: &TransformParams, z: f64, hint: (f64, f64)) -> Result<f64, FlowError> {
    let (z_lo, z_hi) = p.z_range();
    if !(z > z_lo && z < z_hi) {
        return Err(FlowError::OutOfSupport {
            target_z: z,
            z_lo,
            z_hi,
        });
    }
    let (mut lo, mut hi) = if hint.0 < hint.1 {
        hint
    } else {
        (hint.1, hint.0)
    };
    let width = (hi - lo).max(1e-3);

    let mut step = width;
    let mut expansions = 0;
    while transform(p, lo) >= z {
        lo -= step;
        step *= 2.0;
        expansions += 1;
        if expansions > MAX_DOUBLINGS || !lo.is_finite() {
            return Err(FlowError::BracketFailed { target_z: z });
        }
    }
    step = width;
    expansions = 0;
    while transform(p, hi) <= z {
        hi += step;
        step *= 2.0;
        expansions += 1;
        if expansions > MAX_DOUBLINGS || !hi.is_finite() {
            return Err(FlowError::BracketFailed { target_z: z });
        }
    }

    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if transform(p, mid) < z {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

const MAX_DOUBLINGS: usize = 200;

/// `y` with `cdf(p, y) = prob`, to within bisection resolution.
pub fn quantile(
    p: &TransformParams,
    prob: f64,
    base: BaseDistribution,
    hint: (f64, f64),
) -> Result<f64, FlowError> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(FlowError::InvalidProbability(prob));
    }
    let z = base.quantile(prob);
    let (z_lo, z_hi) = p.z_range();
    if !(z > z_lo && z < z_hi) {
        return Err(FlowError::OutOfSupport {
            target_z: z,
            z_lo,
            z_hi,
        });
    }
    invert(p, z, hint)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub values: Vec<f64>,
    pub rejections: usize,
    /// More than half of all base draws fell outside the attainable range.
    pub high_rejection: bool,
}

/// Draws `z` from the base, rejects draws outside the attainable range and
/// maps the rest back through the inverse transformation.
pub fn sample<R: Rng + ?Sized>(
    p: &TransformParams,
    n: usize,
    rng: &mut R,
    base: BaseDistribution,
    hint: (f64, f64),
) -> Result<Samples, FlowError> {
    let (z_lo, z_hi) = p.z_range();
    let mass = base.cdf(z_hi) - base.cdf(z_lo);
    if n > 0 && mass <= 0.0 {
        return Err(FlowError::OutOfSupport {
            target_z: f64::NAN,
            z_lo,
            z_hi,
        });
    }
    let max_draws = 1000 + n.saturating_mul(1000);
    let mut values = Vec::with_capacity(n);
    let mut rejections = 0;
    while values.len() < n {
        if values.len() + rejections >= max_draws {
            return Err(FlowError::OutOfSupport {
                target_z: f64::NAN,
                z_lo,
                z_hi,
            });
        }
        let z: f64 = match base {
            BaseDistribution::StandardNormal => rng.sample(StandardNormal),
        };
        if z <= z_lo || z >= z_hi {
            rejections += 1;
            continue;
        }
        match invert(p, z, hint) {
            Ok(y) => values.push(y),
            Err(FlowError::BracketFailed { .. }) => rejections += 1,
            Err(e) => return Err(e),
        }
    }
    let high_rejection = rejections > values.len();
    if high_rejection {
        log::warn!(
            "sampling rejected {rejections} of {} base draws; attainable z-range is ({z_lo}, {z_hi})",
            rejections + values.len()
        );
    }
    Ok(Samples {
        values,
        rejections,
        high_rejection,
    })
}
