use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperpriors: independent `N(coef_mean, coef_variance)` on regression
/// coefficients, `Ga(precision_shape, precision_rate)` on each precision, and
/// a uniform prior on `phi` over `(phi_lower, phi_upper)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub coef_mean: f64,
    pub coef_variance: f64,
    pub precision_shape: f64,
    pub precision_rate: f64,
    pub phi_lower: f64,
    pub phi_upper: f64,
}

impl PriorConfig {
    pub fn with_phi(phi: PhiPriorSpec) -> Result<Self> {
        let (phi_lower, phi_upper) = phi.bounds()?;
        Ok(PriorConfig {
            phi_lower,
            phi_upper,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.coef_variance > 0.0) {
            return Err(Error::Config("coef_variance must be positive".into()));
        }
        if !(self.precision_shape > 0.0 && self.precision_rate > 0.0) {
            return Err(Error::Config(
                "precision shape and rate must be positive".into(),
            ));
        }
        if !(self.phi_lower > 0.0 && self.phi_lower < self.phi_upper) {
            return Err(Error::Config(format!(
                "phi bounds must satisfy 0 < lower < upper, got ({}, {})",
                self.phi_lower, self.phi_upper
            )));
        }
        Ok(())
    }
}

impl Default for PriorConfig {
    fn default() -> Self {
        let (phi_lower, phi_upper) = PhiPriorSpec::default()
            .bounds()
            .expect("default phi prior is valid");
        PriorConfig {
            coef_mean: 0.0,
            coef_variance: 1000.0,
            precision_shape: 1.0,
            precision_rate: 0.01,
            phi_lower,
            phi_upper,
        }
    }
}

/// Prior limits for `phi` expressed as the distances at which correlation
/// falls to `rho`, using `d = -ln(rho) / phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiPriorSpec {
    pub rho: f64,
    pub d_near_km: f64,
    pub d_far_km: f64,
}

impl Default for PhiPriorSpec {
    fn default() -> Self {
        PhiPriorSpec {
            rho: 0.01,
            d_near_km: 25.0,
            d_far_km: 2000.0,
        }
    }
}

impl PhiPriorSpec {
    /// `(phi_lower, phi_upper)`
    pub fn bounds(&self) -> Result<(f64, f64)> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!(
                "rho must lie in (0, 1), got {}",
                self.rho
            )));
        }
        if !(self.d_near_km > 0.0 && self.d_near_km < self.d_far_km) {
            return Err(Error::Config(format!(
                "need 0 < d_near < d_far, got {} and {}",
                self.d_near_km, self.d_far_km
            )));
        }
        let k = -self.rho.ln();
        Ok((k / self.d_far_km, k / self.d_near_km))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chains: usize,
    pub burn_in: usize,
    /// Retained draws per chain.
    pub samples: usize,
    pub thin: usize,
    pub seed: u64,
    /// Initial random-walk scale on the logit of `phi`.
    pub proposal_sd_init: f64,
    pub adapt_target_accept: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 2,
            burn_in: 40_000,
            samples: 10_000,
            thin: 1,
            seed: 20_010,
            proposal_sd_init: 0.5,
            adapt_target_accept: 0.35,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.samples == 0 || self.thin == 0 {
            return Err(Error::Config(
                "chains, samples and thin must be at least 1".into(),
            ));
        }
        if !(self.proposal_sd_init > 0.0) {
            return Err(Error::Config("proposal_sd_init must be positive".into()));
        }
        if !(self.adapt_target_accept > 0.0 && self.adapt_target_accept < 1.0) {
            return Err(Error::Config(
                "adapt_target_accept must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}
