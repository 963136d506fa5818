use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use super::{DataError, Dataset};
use crate::autodiff::Tensor;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Synthetic one-feature generators with closed-form conditional densities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyGenerator {
    /// Exponential noise of growing amplitude on a rising sinusoid.
    Sinusoidal,
    /// Two Gaussian modes whose separation grows with `x`; mean zero.
    Bimodal,
    /// Gaussian noise whose standard deviation grows with `x`.
    Heteroscedastic,
}

impl ToyGenerator {
    pub const ALL: [Self; 3] = [Self::Sinusoidal, Self::Bimodal, Self::Heteroscedastic];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sinusoidal => "sinusoidal",
            Self::Bimodal => "bimodal",
            Self::Heteroscedastic => "heteroscedastic",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::Sinusoidal => "x ~ U(0, 10); y = 0.3 x + sin(x) + (0.1 + 0.05 x) E, E ~ Exp(1)",
            Self::Bimodal => {
                "x ~ U(0, 5); s = +-1 equiprobable; y = s (0.25 + 0.25 x) + 0.1 N, N ~ N(0, 1)"
            }
            Self::Heteroscedastic => "x ~ U(0, 1); y = 2 x + (0.5 + x) N, N ~ N(0, 1)",
        }
    }

    pub fn generate(self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, y) = match self {
                Self::Sinusoidal => {
                    let x: f64 = rng.gen_range(0.0..10.0);
                    let e: f64 = rng.sample(Exp1);
                    (x, 0.3 * x + x.sin() + (0.1 + 0.05 * x) * e)
                }
                Self::Bimodal => {
                    let x = rng.gen_range(0.0..5.0);
                    let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let noise: f64 = rng.sample(StandardNormal);
                    (x, s * (0.25 + 0.25 * x) + 0.1 * noise)
                }
                Self::Heteroscedastic => {
                    let x = rng.gen_range(0.0..1.0);
                    let noise: f64 = rng.sample(StandardNormal);
                    (x, 2.0 * x + (0.5 + x) * noise)
                }
            };
            xs.push(x);
            ys.push(y);
        }
        Dataset::new(Tensor::column(&xs), ys, vec!["x".into()], "y").expect("one column")
    }

    /// `log f(y | x)` of the generating process; `-inf` outside the support.
    pub fn log_density(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Sinusoidal => {
                let sigma = 0.1 + 0.05 * x;
                let r = (y - 0.3 * x - x.sin()) / sigma;
                if r < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    -r - sigma.ln()
                }
            }
            Self::Bimodal => {
                let mu = 0.25 + 0.25 * x;
                let sd = 0.1;
                let a = normal_log_pdf(y, mu, sd);
                let b = normal_log_pdf(y, -mu, sd);
                let m = a.max(b);
                m + (0.5 * ((a - m).exp() + (b - m).exp())).ln()
            }
            Self::Heteroscedastic => normal_log_pdf(y, 2.0 * x, 0.5 + x),
        }
    }

    /// Mean negative log-density of the generator on the rows of `data`.
    pub fn nll(self, data: &Dataset) -> f64 {
        let total: f64 = (0..data.len())
            .map(|i| -self.log_density(data.x.get(i, 0), data.y[i]))
            .sum();
        total / data.len() as f64
    }
}

impl FromStr for ToyGenerator {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DataError::UnknownGenerator(s.to_string()))
    }
}

fn normal_log_pdf(y: f64, mean: f64, sd: f64) -> f64 {
    let r = (y - mean) / sd;
    -0.5 * r * r - sd.ln() - HALF_LN_2PI
}

pub fn gen_toy_sinusoidal(n: usize, seed: u64) -> Dataset {
    ToyGenerator::Sinusoidal.generate(n, seed)
}

pub fn gen_toy_bimodal(n: usize, seed: u64) -> Dataset {
    ToyGenerator::Bimodal.generate(n, seed)
}

pub fn gen_heteroscedastic_gaussian(n: usize, seed: u64) -> Dataset {
    ToyGenerator::Heteroscedastic.generate(n, seed)
}
