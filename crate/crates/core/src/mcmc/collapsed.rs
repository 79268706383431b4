//! Updates with the spatial effects integrated out, using the marginal
//! model `y ~ N(X beta, C)` with `C = sigma2_m Sigma + sigma2_nu I`.
//!
//! Drawing `beta` or `sigma2_nu` from these marginals and then `m` from its
//! full conditional is a blocked draw of the pair, which breaks the strong
//! posterior coupling between the effects and the intercept and nugget.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::PriorConfig;
use super::gibbs::GaussianConditional;
use super::phi::{acceptance_probability, metropolis_accept};
use crate::error::{Error, Result};
use crate::spatial::{cholesky_with_jitter, CorrelationStructure};

/// Lower Cholesky factor of `C`.
pub fn marginal_factor(
    corr: &CorrelationStructure,
    sigma2_nu: f64,
    sigma2_m: f64,
) -> Result<DMatrix<f64>> {
    let mut c = &corr.correlation * sigma2_m;
    for i in 0..c.nrows() {
        c[(i, i)] += sigma2_nu;
    }
    Ok(cholesky_with_jitter(&c)
        .map_err(|e| e.with_context("marginal covariance"))?
        .0)
}

/// `log N(r; 0, C)` up to a constant, from the factor of `C`.
fn log_density(l: &DMatrix<f64>, r: &DVector<f64>) -> f64 {
    let w = l.solve_lower_triangular(r).expect("positive diagonal");
    let log_det: f64 = l.diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    -0.5 * (log_det + w.norm_squared())
}

/// Full conditional of `beta` with `m` integrated out:
/// precision `X^T C^{-1} X + I / v`, mean from `X^T C^{-1} y + mu / v`.
pub fn beta_marginal_conditional(
    y: &DVector<f64>,
    design: &DMatrix<f64>,
    factor: &DMatrix<f64>,
    prior: &PriorConfig,
) -> Result<GaussianConditional> {
    let p = design.ncols();
    let wx = factor
        .solve_lower_triangular(design)
        .expect("positive diagonal");
    let wy = factor.solve_lower_triangular(y).expect("positive diagonal");
    let mut precision = wx.tr_mul(&wx);
    for k in 0..p {
        precision[(k, k)] += 1.0 / prior.coef_variance;
    }
    let rhs = wx.tr_mul(&wy) + DVector::from_element(p, prior.coef_mean / prior.coef_variance);
    let chol = precision.cholesky().ok_or_else(|| Error::Factorization {
        context: " of the marginal coefficient precision".into(),
        jitter: 0.0,
    })?;
    Ok(GaussianConditional {
        mean: chol.solve(&rhs),
        precision_chol: chol.unpack(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuggetStep {
    pub sigma2_nu: f64,
    pub acceptance_probability: f64,
}

/// Random-walk Metropolis step on `log sigma2_nu` targeting its marginal
/// posterior given `r = y - X beta`, `sigma2_m` and `phi`. The prior is
/// `Ga(shape, rate)` on the precision.
pub fn metropolis_update_nugget<R: Rng + ?Sized>(
    resid: &DVector<f64>,
    sigma2_nu: f64,
    sigma2_m: f64,
    corr: &CorrelationStructure,
    prior: &PriorConfig,
    proposal_sd: f64,
    rng: &mut R,
) -> Result<NuggetStep> {
    // inverse-gamma log density of sigma2 plus the log-scale Jacobian
    let log_prior = |s2: f64| -prior.precision_shape * s2.ln() - prior.precision_rate / s2;
    let step: f64 = rng.sample(StandardNormal);
    let proposed = sigma2_nu * (proposal_sd * step).exp();
    let log_ratio = if proposed.is_finite() && proposed > 0.0 {
        log_density(&marginal_factor(corr, proposed, sigma2_m)?, resid) + log_prior(proposed)
            - log_density(&marginal_factor(corr, sigma2_nu, sigma2_m)?, resid)
            - log_prior(sigma2_nu)
    } else {
        f64::NEG_INFINITY
    };
    let prob = acceptance_probability(log_ratio);
    let value = if metropolis_accept(log_ratio, rng) {
        proposed
    } else {
        sigma2_nu
    };
    Ok(NuggetStep {
        sigma2_nu: value,
        acceptance_probability: prob,
    })
}
