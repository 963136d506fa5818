use std::collections::BTreeMap;

use serde::Serialize;

use super::{AutodiffError, Parameter, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - central| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub worst_parameter: Option<String>,
    pub worst_coordinate: Option<usize>,
    pub coordinates: usize,
}

/// Compares analytic gradients against central differences, coordinate by
/// coordinate, at the point given by `params`.
///
/// `value_and_grad` must return the function value and a gradient tensor for
/// every parameter id it depends on; missing ids count as zero gradient.
pub fn grad_check<E, F>(
    params: &[Parameter],
    step: f64,
    mut value_and_grad: F,
) -> Result<GradCheckReport, E>
where
    E: From<AutodiffError>,
    F: FnMut(&[Parameter]) -> Result<(f64, BTreeMap<String, Tensor>), E>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let (value, analytic) = value_and_grad(params)?;
    if !value.is_finite() {
        return Err(AutodiffError::NonFiniteValue {
            parameter: "<base point>".into(),
            coordinate: 0,
        }
        .into());
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_parameter: None,
        worst_coordinate: None,
        coordinates: 0,
    };
    for p in 0..work.len() {
        for k in 0..work[p].tensor.len() {
            let original = work[p].tensor.data()[k];
            work[p].tensor.data_mut()[k] = original + step;
            let (plus, _) = value_and_grad(&work)?;
            work[p].tensor.data_mut()[k] = original - step;
            let (minus, _) = value_and_grad(&work)?;
            work[p].tensor.data_mut()[k] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(AutodiffError::NonFiniteValue {
                    parameter: work[p].id.clone(),
                    coordinate: k,
                }
                .into());
            }
            let numeric = (plus - minus) / (2.0 * step);
            let exact = analytic.get(&work[p].id).map_or(0.0, |g| g.data()[k]);
            let err = (exact - numeric).abs() / exact.abs().max(1.0);
            report.coordinates += 1;
            if report.worst_parameter.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_parameter = Some(work[p].id.clone());
                report.worst_coordinate = Some(k);
            }
        }
    }
    Ok(report)
}
