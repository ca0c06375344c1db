//! Central-difference gradient oracle.

use crate::error::{Error, Result};

/// Largest relative error between `analytic` and central differences of
/// `loss` at `params`, over every coordinate.
///
/// The relative error of a coordinate is
/// `|analytic - fd| / (|fd| + 1e-12)`.
pub fn finite_difference_check<F>(loss: F, params: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let all: Vec<usize> = (0..params.len()).collect();
    finite_difference_check_at(loss, params, analytic, step, &all)
}

/// Same as [`finite_difference_check`], restricted to the given coordinates.
pub fn finite_difference_check_at<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    indices: &[usize],
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != params.len() {
        return Err(Error::shape(format!(
            "analytic gradient has {} entries, params have {}",
            analytic.len(),
            params.len()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let base = loss(params);
    if base.to_bits() != loss(params).to_bits() {
        return Err(Error::contract("loss is not deterministic at fixed parameters"));
    }
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = p[i];
        p[i] = orig + step;
        let up = loss(&p);
        p[i] = orig - step;
        let down = loss(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let rel = (analytic[i] - fd).abs() / (fd.abs() + 1e-12);
        if !rel.is_finite() {
            return Err(Error::numeric(format!("non-finite difference at coordinate {i}")));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}
