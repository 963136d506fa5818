use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::autodiff::Tensor;

/// Per-column min-max map to `[0, 1]`, fitted on training rows only.
///
/// A constant column keeps scale 1 and is only shifted by its minimum.
/// Rows outside the training range are mapped without clamping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub x_min: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_min: f64,
    pub y_scale: f64,
}

impl Scaler {
    pub fn fit(train: &Dataset) -> Result<Self, DataError> {
        if train.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let p = train.n_features();
        let mut x_min = vec![f64::INFINITY; p];
        let mut x_max = vec![f64::NEG_INFINITY; p];
        for i in 0..train.len() {
            for (j, &v) in train.x.row_slice(i).iter().enumerate() {
                x_min[j] = x_min[j].min(v);
                x_max[j] = x_max[j].max(v);
            }
        }
        let x_scale = (0..p)
            .map(|j| range_or_unit(x_max[j] - x_min[j], &train.feature_names[j]))
            .collect();
        let (y_min, y_max) = train
            .y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Ok(Self {
            x_min,
            x_scale,
            y_min,
            y_scale: range_or_unit(y_max - y_min, &train.target_name),
        })
    }

    /// Leaves every value unchanged.
    pub fn identity(n_features: usize) -> Self {
        Self {
            x_min: vec![0.0; n_features],
            x_scale: vec![1.0; n_features],
            y_min: 0.0,
            y_scale: 1.0,
        }
    }

    pub fn n_features(&self) -> usize {
        self.x_min.len()
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset, DataError> {
        let x = self.apply_x(&data.x)?;
        Ok(Dataset {
            x,
            y: data.y.iter().map(|&v| self.apply_y(v)).collect(),
            feature_names: data.feature_names.clone(),
            target_name: data.target_name.clone(),
        })
    }

    pub fn apply_x(&self, x: &Tensor) -> Result<Tensor, DataError> {
        if x.cols() != self.n_features() {
            return Err(DataError::DimensionMismatch {
                expected: self.n_features(),
                got: x.cols(),
            });
        }
        let p = self.n_features();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % p;
            *v = (*v - self.x_min[j]) / self.x_scale[j];
        }
        Ok(out)
    }

    pub fn apply_y(&self, y: f64) -> f64 {
        (y - self.y_min) / self.y_scale
    }

    pub fn invert_y(&self, scaled: f64) -> f64 {
        scaled * self.y_scale + self.y_min
    }

    pub fn invert_x(&self, x: &Tensor) -> Result<Tensor, DataError> {
        if x.cols() != self.n_features() {
            return Err(DataError::DimensionMismatch {
                expected: self.n_features(),
                got: x.cols(),
            });
        }
        let p = self.n_features();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % p;
            *v = *v * self.x_scale[j] + self.x_min[j];
        }
        Ok(out)
    }
}

fn range_or_unit(range: f64, column: &str) -> f64 {
    if range > 0.0 {
        range
    } else {
        log::warn!("column `{column}` is constant on the training rows; left unscaled");
        1.0
    }
}

/// Additive term turning a scaled-space NLL into an original-scale NLL:
/// `y -> (y - y_min) / s_y` multiplies densities by `s_y`, so the
/// original-scale NLL is larger by `ln s_y`.
pub fn nll_scale_correction(scaler: &Scaler) -> f64 {
    scaler.y_scale.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(x: Vec<f64>, p: usize, y: Vec<f64>) -> Dataset {
        let names = (0..p).map(|j| format!("x{j}")).collect();
        Dataset::new(Tensor::new(y.len(), p, x).unwrap(), y, names, "y").unwrap()
    }

    #[test]
    fn maps_training_range_to_unit_interval_without_clamping() {
        let train = dataset(vec![1.0, 2.0, 3.0], 1, vec![2.0, 4.0, 10.0]);
        let s = Scaler::fit(&train).unwrap();
        let scaled = s.apply(&train).unwrap();
        assert_eq!(scaled.y, [0.0, 0.25, 1.0]);
        assert_eq!(scaled.x.data(), [0.0, 0.5, 1.0]);
        assert_eq!(s.apply_y(12.0), 1.25);
        assert_eq!(nll_scale_correction(&s), 8f64.ln());
    }

    #[test]
    fn constant_column_is_shifted_only() {
        let train = dataset(vec![5.0, 1.0, 5.0, 2.0], 2, vec![0.0, 1.0]);
        let s = Scaler::fit(&train).unwrap();
        assert_eq!(s.x_scale[0], 1.0);
        assert_eq!(s.apply(&train).unwrap().x.data(), [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..300).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let y: Vec<f64> = (0..100).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let d = dataset(x, 3, y);
        let s = Scaler::fit(&d.select(&(0..60).collect::<Vec<_>>())).unwrap();
        let scaled = s.apply(&d).unwrap();
        for (raw, sc) in d.y.iter().zip(&scaled.y) {
            assert!((s.invert_y(*sc) - raw).abs() <= 1e-12 * raw.abs().max(1.0));
        }
        let back = s.invert_x(&scaled.x).unwrap();
        for (a, b) in back.data().iter().zip(d.x.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    #[allow(clippy::approx_constant)] // literal oracle, deliberately not LN_10
    fn unit_scale_has_no_correction() {
        assert_eq!(nll_scale_correction(&Scaler::identity(2)), 0.0);
        let mut s = Scaler::identity(1);
        s.y_scale = 10.0;
        assert!((nll_scale_correction(&s) - 2.302_585_093).abs() < 1e-9);
        assert!(Scaler::fit(&dataset(vec![], 1, vec![])).is_err());
    }
}
