use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::autodiff::Tensor;
use crate::data::Scaler;
use crate::flow::{
    invert, log_density, quantile, transform, BaseDistribution, DensityModel, FlowError,
    TransformParams,
};

pub const DEFAULT_GRID_POINTS: usize = 512;
/// Probability left out in each tail when bounding the grid.
pub const TAIL_LEVEL: f64 = 1e-4;
const MAX_GRID_POINTS: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    /// Requested original-scale range; widened to the tail quantiles.
    pub range: Option<(f64, f64)>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: DEFAULT_GRID_POINTS,
            range: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileEntry {
    pub level: f64,
    pub value: Option<f64>,
    /// Why `value` is missing, e.g. the level is outside the attainable range.
    pub error: Option<String>,
}

/// Conditional density and CDF of `y` at one input, on the original scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpdGrid {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub density: Vec<f64>,
    pub cdf: Vec<f64>,
    pub quantiles: Vec<QuantileEntry>,
    /// Trapezoidal mass of `density` over the grid.
    pub mass: f64,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    x: &'a [f64],
    mass: f64,
    quantiles: &'a [QuantileEntry],
}

impl CpdGrid {
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let io = |source| EvalError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(out, "y,density,cdf").map_err(io)?;
        for i in 0..self.y.len() {
            writeln!(out, "{},{},{}", self.y[i], self.density[i], self.cdf[i]).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Quantile sidecar consumed next to the CSV.
    pub fn write_quantiles_json(&self, path: &Path) -> Result<(), EvalError> {
        let sidecar = Sidecar {
            x: &self.x,
            mass: self.mass,
            quantiles: &self.quantiles,
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(path, text).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Locations of the local maxima, read off sign changes of the discrete
    /// derivative. Bumps below `1e-3` of the peak density are ignored.
    pub fn modes(&self) -> Vec<f64> {
        let peak = self.density.iter().cloned().fold(0.0, f64::max);
        let floor = 1e-3 * peak;
        let mut modes = Vec::new();
        let mut rising = false;
        for (i, w) in self.density.windows(2).enumerate() {
            let d = w[1] - w[0];
            if d > 0.0 {
                rising = true;
            } else if d < 0.0 {
                if rising && w[0] > floor {
                    modes.push(self.y[i]);
                }
                rising = false;
            }
        }
        modes
    }

    pub fn mode_count(&self) -> usize {
        self.modes().len()
    }

    /// Original-scale location of the highest density on the grid.
    pub fn argmax(&self) -> f64 {
        let (i, _) =
            self.density
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc },
                );
        self.y[i]
    }

    /// Sup-norm gap between the exported CDF and `cdf[0]` plus the running
    /// trapezoidal integral of the density.
    pub fn cdf_integral_gap(&self) -> f64 {
        let mut acc = self.cdf[0];
        let mut worst: f64 = 0.0;
        for i in 1..self.y.len() {
            acc += 0.5 * (self.density[i] + self.density[i - 1]) * (self.y[i] - self.y[i - 1]);
            worst = worst.max((acc - self.cdf[i]).abs());
        }
        worst
    }
}

/// Exports the conditional distribution at raw input `x`.
pub fn cpd_export(
    model: &dyn DensityModel,
    scaler: &Scaler,
    x: &[f64],
    grid: &GridSpec,
    levels: &[f64],
) -> Result<CpdGrid, EvalError> {
    if grid.points < 2 {
        return Err(EvalError::GridPoints(grid.points));
    }
    let base = BaseDistribution::StandardNormal;
    let xs = scaler.apply_x(&Tensor::row(x))?;
    let p = model
        .transform_params(&xs)?
        .pop()
        .expect("one row in, one row out");

    let mut lo = tail_bound(&p, base, false)?;
    let mut hi = tail_bound(&p, base, true)?;
    if let Some((a, b)) = grid.range {
        lo = lo.min(scaler.apply_y(a.min(b)));
        hi = hi.max(scaler.apply_y(a.max(b)));
    }

    let s_y = scaler.y_scale;
    let mut points = grid.points;
    let mut out = evaluate(&p, base, scaler, lo, hi, points)?;
    // sharp modes can defeat the trapezoid at the default resolution
    while !(0.99..=1.001).contains(&out.mass)
        && points < MAX_GRID_POINTS
        && attainable_mass(&p, base) > 0.9999
    {
        points *= 2;
        out = evaluate(&p, base, scaler, lo, hi, points)?;
    }
    out.x = x.to_vec();
    out.quantiles = levels
        .iter()
        .map(|&level| match quantile(&p, level, base, (lo, hi)) {
            Ok(v) => QuantileEntry {
                level,
                value: Some(v * s_y + scaler.y_min),
                error: None,
            },
            Err(e) => QuantileEntry {
                level,
                value: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok(out)
}

fn attainable_mass(p: &TransformParams, base: BaseDistribution) -> f64 {
    let (z_lo, z_hi) = p.z_range();
    base.cdf(z_hi) - base.cdf(z_lo)
}

/// Scaled-space `y` at the lower (or upper) tail level. When the level is
/// not attainable the bound falls back to the same fraction of the
/// attainable mass.
fn tail_bound(p: &TransformParams, base: BaseDistribution, upper: bool) -> Result<f64, FlowError> {
    let level = if upper { 1.0 - TAIL_LEVEL } else { TAIL_LEVEL };
    match quantile(p, level, base, (0.0, 1.0)) {
        Ok(y) => Ok(y),
        Err(FlowError::OutOfSupport { z_lo, z_hi, .. }) => {
            let (c_lo, c_hi) = (base.cdf(z_lo), base.cdf(z_hi));
            let prob = if upper {
                c_hi - TAIL_LEVEL * (c_hi - c_lo)
            } else {
                c_lo + TAIL_LEVEL * (c_hi - c_lo)
            };
            let z = base.quantile(prob).clamp(z_lo, z_hi);
            // stay strictly inside the open range
            let z = z.clamp(z_lo + 1e-9 * (z_hi - z_lo), z_hi - 1e-9 * (z_hi - z_lo));
            invert(p, z, (0.0, 1.0))
        }
        Err(e) => Err(e),
    }
}

fn evaluate(
    p: &TransformParams,
    base: BaseDistribution,
    scaler: &Scaler,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<CpdGrid, EvalError> {
    let s_y = scaler.y_scale;
    let step = (hi - lo) / (points - 1) as f64;
    let mut y = Vec::with_capacity(points);
    let mut density = Vec::with_capacity(points);
    let mut cdf = Vec::with_capacity(points);
    for k in 0..points {
        let ys = if k == points - 1 {
            hi
        } else {
            lo + k as f64 * step
        };
        let d = match log_density(p, ys, base) {
            Ok(ld) => ld.exp() / s_y,
            // the log-density underflows far in the tails
            Err(FlowError::NonFinite { .. }) => 0.0,
            Err(e) => return Err(e.into()),
        };
        y.push(scaler.invert_y(ys));
        density.push(d);
        cdf.push(base.cdf(transform(p, ys)));
    }
    // monotone by construction; guard against last-ulp noise
    for k in 1..points {
        if cdf[k] < cdf[k - 1] {
            cdf[k] = cdf[k - 1];
        }
    }
    let mass = (1..points)
        .map(|k| 0.5 * (density[k] + density[k - 1]) * (y[k] - y[k - 1]))
        .sum();
    Ok(CpdGrid {
        x: Vec::new(),
        y,
        density,
        cdf,
        quantiles: Vec::new(),
        mass,
    })
}
