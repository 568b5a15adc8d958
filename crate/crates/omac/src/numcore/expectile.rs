//! Asymmetric least-squares (expectile) loss.

use crate::error::{OmacError, Result};

pub fn validate_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(OmacError::Config(format!(
            "expectile tau must lie in (0,1), got {tau}"
        )));
    }
    Ok(())
}

/// Asymmetric weight |tau - 1(u<0)|.
pub fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// loss = |tau - 1(u<0)| u^2, derivative = 2|tau - 1(u<0)| u.
/// The u=0 subgradient is 0 (both one-sided derivatives vanish).
pub fn expectile_loss(u: &[f64], tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    validate_tau(tau)?;
    let mut loss = Vec::with_capacity(u.len());
    let mut grad = Vec::with_capacity(u.len());
    for &ui in u {
        let w = expectile_weight(ui, tau);
        loss.push(w * ui * ui);
        grad.push(2.0 * w * ui);
    }
    Ok((loss, grad))
}
