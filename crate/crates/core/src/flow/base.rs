use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Reference distribution of the transformed variable `z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDistribution {
    #[default]
    StandardNormal,
}

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

impl BaseDistribution {
    pub fn log_pdf(self, z: f64) -> f64 {
        match self {
            Self::StandardNormal => -0.5 * z * z - HALF_LN_2PI,
        }
    }

    pub fn cdf(self, z: f64) -> f64 {
        match self {
            Self::StandardNormal => {
                0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
            }
        }
    }

    /// Inverse CDF; `prob` must lie in `(0, 1)`.
    pub fn quantile(self, prob: f64) -> f64 {
        match self {
            Self::StandardNormal => {
                // Newton polish on top of the library inverse.
                let mut z = standard_normal().inverse_cdf(prob);
                for _ in 0..2 {
                    let density = self.log_pdf(z).exp();
                    if !z.is_finite() || density <= 0.0 {
                        break;
                    }
                    z -= (self.cdf(z) - prob) / density;
                }
                z
            }
        }
    }
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_reference_values() {
        let base = BaseDistribution::StandardNormal;
        assert!((base.log_pdf(0.5) - (-0.125 - HALF_LN_2PI)).abs() < 1e-15);
        assert!((HALF_LN_2PI - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        // Phi(0.5) = 0.691462461274013...
        assert!((base.cdf(0.5) - 0.691_462_461_274_013_1).abs() < 1e-14);
        assert_eq!(base.cdf(0.0), 0.5);
        assert!(base.cdf(-40.0) >= 0.0 && base.cdf(-40.0) < 1e-300);
        assert_eq!(base.cdf(40.0), 1.0);
        assert!(base.log_pdf(40.0).is_finite());
        for p in [1e-6, 0.1, 0.5, 0.9, 1.0 - 1e-6] {
            assert!((base.cdf(base.quantile(p)) - p).abs() < 1e-12);
        }
    }
}
