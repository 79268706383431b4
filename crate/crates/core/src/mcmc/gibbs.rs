//! Conjugate full conditionals of the stage-one model
//! `y = X beta + m + nu`, `m ~ MVN(0, sigma2_m Sigma(phi))`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::config::PriorConfig;
use crate::error::{Error, Result};
use crate::spatial::{cholesky_with_jitter, CorrelationStructure};

fn std_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Gaussian full conditional in precision form: mean and lower Cholesky
/// factor of the precision matrix.
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub mean: DVector<f64>,
    pub precision_chol: DMatrix<f64>,
}

impl GaussianConditional {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = std_normal_vec(self.mean.len(), rng);
        let offset = self
            .precision_chol
            .tr_solve_lower_triangular(&z)
            .expect("positive diagonal");
        &self.mean + offset
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.mean.len();
        let linv = self
            .precision_chol
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("positive diagonal");
        linv.tr_mul(&linv)
    }
}

/// Full conditional of `beta` given `y - m`, `sigma2_nu` and the
/// independent normal prior.
pub fn beta_conditional(
    y_minus_m: &DVector<f64>,
    design: &DMatrix<f64>,
    sigma2_nu: f64,
    prior: &PriorConfig,
) -> Result<GaussianConditional> {
    let p = design.ncols();
    let mut precision = design.tr_mul(design) / sigma2_nu;
    for k in 0..p {
        precision[(k, k)] += 1.0 / prior.coef_variance;
    }
    let rhs = design.tr_mul(y_minus_m) / sigma2_nu
        + DVector::from_element(p, prior.coef_mean / prior.coef_variance);
    let chol = precision.cholesky().ok_or_else(|| Error::Factorization {
        context: " of the coefficient posterior precision".into(),
        jitter: 0.0,
    })?;
    Ok(GaussianConditional {
        mean: chol.solve(&rhs),
        precision_chol: chol.unpack(),
    })
}

pub fn gibbs_update_beta<R: Rng + ?Sized>(
    y: &DVector<f64>,
    m: &DVector<f64>,
    design: &DMatrix<f64>,
    sigma2_nu: f64,
    prior: &PriorConfig,
    rng: &mut R,
) -> Result<DVector<f64>> {
    Ok(beta_conditional(&(y - m), design, sigma2_nu, prior)?.sample(rng))
}

/// Mean and covariance of `m` given residuals `r = y - X beta`.
///
/// With `K = sigma2_m Sigma` and `C = K + sigma2_nu I`, the conditional is
/// `N(K C^{-1} r, K - K C^{-1} K)`, identical to the precision form
/// `(I / sigma2_nu + Sigma^{-1} / sigma2_m)^{-1}`.
pub fn spatial_conditional_moments(
    residual: &DVector<f64>,
    sigma2_nu: f64,
    sigma2_m: f64,
    corr: &CorrelationStructure,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = &corr.correlation * sigma2_m;
    let c = marginal_covariance(&k, sigma2_nu);
    let (l, _) = cholesky_with_jitter(&c)?;
    let solve = |b: &DMatrix<f64>| {
        let w = l.solve_lower_triangular(b).expect("positive diagonal");
        l.tr_solve_lower_triangular(&w).expect("positive diagonal")
    };
    let c_inv_k = solve(&k);
    let mean = c_inv_k.tr_mul(residual);
    let mut cov = &k - &k * &c_inv_k;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean, cov))
}

fn marginal_covariance(k: &DMatrix<f64>, sigma2_nu: f64) -> DMatrix<f64> {
    let mut c = k.clone();
    for i in 0..c.nrows() {
        c[(i, i)] += sigma2_nu;
    }
    c
}

/// Exact draw of the spatial effects from their Gaussian full conditional.
///
/// Uses a prior draw `m*` and a noise draw `e*` corrected by
/// `K C^{-1} (r - m* - e*)`; only `C = sigma2_m Sigma + sigma2_nu I` is
/// factorized and no matrix is inverted.
pub fn gibbs_update_spatial<R: Rng + ?Sized>(
    residual: &DVector<f64>,
    sigma2_nu: f64,
    sigma2_m: f64,
    corr: &CorrelationStructure,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = residual.len();
    let prior_draw = corr.cholesky_lower() * std_normal_vec(n, rng) * sigma2_m.sqrt();
    let noise = std_normal_vec(n, rng) * sigma2_nu.sqrt();
    let c = marginal_covariance(&(&corr.correlation * sigma2_m), sigma2_nu);
    let (l, _) = cholesky_with_jitter(&c).map_err(|e| e.with_context("spatial update"))?;
    let gap = residual - &prior_draw - noise;
    let w = l.solve_lower_triangular(&gap).expect("positive diagonal");
    let c_inv_gap = l.tr_solve_lower_triangular(&w).expect("positive diagonal");
    Ok(prior_draw + (&corr.correlation * c_inv_gap) * sigma2_m)
}

/// Variance whose precision has a `Ga(shape, rate)` prior, given `n`
/// Gaussian terms with sum of squares `sum_sq`.
pub fn draw_variance<R: Rng + ?Sized>(
    prior: &PriorConfig,
    n: usize,
    sum_sq: f64,
    rng: &mut R,
) -> f64 {
    let shape = prior.precision_shape + 0.5 * n as f64;
    let rate = prior.precision_rate + 0.5 * sum_sq;
    let precision = Gamma::new(shape, 1.0 / rate)
        .expect("positive shape and rate")
        .sample(rng);
    1.0 / precision.max(f64::MIN_POSITIVE)
}

/// `(sigma2_nu, sigma2_m)` from their conjugate full conditionals. The
/// spatial quadratic form is `m^T Sigma^{-1} m` via the cached factor.
pub fn gibbs_update_precisions<R: Rng + ?Sized>(
    nu_residual: &DVector<f64>,
    m: &DVector<f64>,
    corr: &CorrelationStructure,
    prior: &PriorConfig,
    rng: &mut R,
) -> (f64, f64) {
    let s2_nu = draw_variance(prior, nu_residual.len(), nu_residual.norm_squared(), rng);
    let s2_m = draw_variance(prior, m.len(), corr.quad_form(m), rng);
    (s2_nu, s2_m)
}
