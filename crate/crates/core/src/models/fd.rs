//! Central finite differences, used as an independent gradient oracle.

use super::data::Example;
use super::mlp::Mlp;
use super::params::Params;
use crate::error::{Error, Result};

/// `(f(θ + h e_p) - f(θ - h e_p)) / 2h` for every coordinate `p`.
pub fn central_difference<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for p in 0..theta.len() {
        probe[p] = theta[p] + h;
        let up = f(&probe)?;
        probe[p] = theta[p] - h;
        let down = f(&probe)?;
        probe[p] = theta[p];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Numerical gradient of one example's loss, flattened in block order.
pub fn finite_difference_grad(model: &Mlp, params: &Params, ex: &Example<'_>, h: f64) -> Result<Vec<f64>> {
    let theta = params.flatten();
    central_difference(|flat| model.forward_loss(&params.with_flat(flat)?, ex), &theta, h)
}
