//! Metropolis-within-Gibbs update for the correlation decay `phi`.
//!
//! `phi` has a uniform prior on `(lower, upper)`; the random walk runs on
//! `logit((phi - lower) / (upper - lower))` so proposals never leave the
//! support. The target in that parameterization is the `MVN(0, sigma2_m
//! Sigma(phi))` density of the spatial effects times the Jacobian
//! `(upper - lower) u (1 - u)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::PriorConfig;
use crate::error::Result;
use crate::spatial::CorrelationStructure;

pub fn to_logit(phi: f64, lower: f64, upper: f64) -> f64 {
    let u = (phi - lower) / (upper - lower);
    (u / (1.0 - u)).ln()
}

pub fn from_logit(theta: f64, lower: f64, upper: f64) -> f64 {
    let u = 1.0 / (1.0 + (-theta).exp());
    (lower + (upper - lower) * u).clamp(lower.next_up(), upper.next_down())
}

/// `ln(u (1 - u))` at `u = sigmoid(theta)`, written to avoid underflow.
fn log_jacobian(theta: f64) -> f64 {
    -(theta.abs()) - 2.0 * (-theta.abs()).exp().ln_1p()
}

pub fn acceptance_probability(log_ratio: f64) -> f64 {
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

pub fn metropolis_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

#[derive(Debug)]
pub struct PhiStep {
    /// Correlation structure at the proposed value, when accepted.
    pub accepted: Option<CorrelationStructure>,
    pub acceptance_probability: f64,
}

/// One random-walk Metropolis step for `phi` given the spatial effects `m`.
pub fn metropolis_update_phi<R: Rng + ?Sized>(
    current: &CorrelationStructure,
    m: &DVector<f64>,
    sigma2_m: f64,
    distances: &Arc<DMatrix<f64>>,
    prior: &PriorConfig,
    proposal_sd: f64,
    rng: &mut R,
) -> Result<PhiStep> {
    let (lo, hi) = (prior.phi_lower, prior.phi_upper);
    let theta = to_logit(current.phi, lo, hi);
    let step: f64 = rng.sample(StandardNormal);
    let theta_new = theta + proposal_sd * step;
    let proposed = CorrelationStructure::new(Arc::clone(distances), from_logit(theta_new, lo, hi))?;
    let log_ratio = proposed.mvn_log_density(m, sigma2_m) + log_jacobian(theta_new)
        - current.mvn_log_density(m, sigma2_m)
        - log_jacobian(theta);
    let prob = acceptance_probability(log_ratio);
    let accepted = metropolis_accept(log_ratio, rng).then_some(proposed);
    Ok(PhiStep {
        accepted,
        acceptance_probability: prob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{distance_matrix, exp_correlation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prior() -> PriorConfig {
        PriorConfig {
            phi_lower: 0.002,
            phi_upper: 0.2,
            ..PriorConfig::default()
        }
    }

    #[test]
    fn logit_round_trip() {
        for phi in [0.0021, 0.01, 0.1, 0.199] {
            let t = to_logit(phi, 0.002, 0.2);
            assert!((from_logit(t, 0.002, 0.2) - phi).abs() < 1e-14);
        }
        assert!(from_logit(800.0, 0.002, 0.2) < 0.2);
        assert!(from_logit(-800.0, 0.002, 0.2) > 0.002);
    }

    #[test]
    fn jacobian_matches_direct_formula() {
        for theta in [-5.0, -0.3, 0.0, 1.7, 9.0] {
            let u: f64 = 1.0 / (1.0 + (-theta as f64).exp());
            assert!((log_jacobian(theta) - (u * (1.0 - u)).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_proposals_are_almost_always_accepted() {
        let pts = [(0.0, 0.0), (30.0, 0.0), (0.0, 45.0)];
        let distances = Arc::new(distance_matrix(&pts));
        let mut corr = CorrelationStructure::new(Arc::clone(&distances), 0.03).unwrap();
        let m = DVector::from_vec(vec![0.2, -0.1, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut accepted = 0;
        for _ in 0..2000 {
            let step = metropolis_update_phi(&corr, &m, 0.5, &distances, &prior(), 1e-9, &mut rng)
                .unwrap();
            if let Some(c) = step.accepted {
                corr = c;
                accepted += 1;
            }
        }
        assert!(accepted >= 1990, "accepted {accepted}");
        assert!((corr.phi - 0.03).abs() < 1e-6);
    }

    #[test]
    fn phi_stays_inside_prior_bounds() {
        let pts = [(0.0, 0.0), (30.0, 0.0)];
        let distances = Arc::new(distance_matrix(&pts));
        let mut corr = CorrelationStructure::new(Arc::clone(&distances), 0.03).unwrap();
        let m = DVector::from_vec(vec![0.2, -0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5000 {
            let step =
                metropolis_update_phi(&corr, &m, 0.5, &distances, &prior(), 5.0, &mut rng).unwrap();
            if let Some(c) = step.accepted {
                corr = c;
            }
            assert!(corr.phi > 0.002 && corr.phi < 0.2);
        }
    }

    /// Three-state Metropolis chain with a symmetric proposal, using the same
    /// acceptance rule. Its exact transition matrix must satisfy detailed
    /// balance with respect to the target, and a long simulated run must
    /// visit states in proportion to it.
    #[test]
    fn detailed_balance_on_three_point_target() {
        let target = [0.2, 0.5, 0.3];
        let ln: Vec<f64> = target.iter().map(|p: &f64| p.ln()).collect();
        // propose each other state with probability 1/2
        let mut p = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    p[i][j] = 0.5 * acceptance_probability(ln[j] - ln[i]);
                }
            }
            p[i][i] = 1.0 - p[i].iter().sum::<f64>();
        }
        for i in 0..3 {
            for j in 0..3 {
                assert!((target[i] * p[i][j] - target[j] * p[j][i]).abs() < 1e-15);
            }
        }
        // stationary: pi P = pi
        for j in 0..3 {
            let s: f64 = (0..3).map(|i| target[i] * p[i][j]).sum();
            assert!((s - target[j]).abs() < 1e-15);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = 0usize;
        let mut visits = [0usize; 3];
        let n = 300_000;
        for _ in 0..n {
            let proposal = (state + 1 + rng.random_range(0..2)) % 3;
            if metropolis_accept(ln[proposal] - ln[state], &mut rng) {
                state = proposal;
            }
            visits[state] += 1;
        }
        for k in 0..3 {
            let freq = visits[k] as f64 / n as f64;
            assert!((freq - target[k]).abs() < 0.01, "state {k}: {freq}");
        }
    }

    #[test]
    fn two_site_marginal_matches_quadrature() {
        let d = 60.0;
        let pts = [(0.0, 0.0), (d, 0.0)];
        let distances = Arc::new(distance_matrix(&pts));
        let m = DVector::from_vec(vec![0.5, 0.3]);
        let s2 = 0.4;
        let pr = prior();
        let log_post = |phi: f64| {
            let r = exp_correlation(d, phi);
            let det = 1.0 - r * r;
            let q = (m[0] * m[0] - 2.0 * r * m[0] * m[1] + m[1] * m[1]) / det;
            -0.5 * det.ln() - 0.5 * q / s2
        };
        let bins = 20;
        let width = (pr.phi_upper - pr.phi_lower) / bins as f64;
        let mut mass = vec![0.0; bins];
        let sub = 200;
        for b in 0..bins {
            for k in 0..sub {
                let phi = pr.phi_lower + width * (b as f64 + (k as f64 + 0.5) / sub as f64);
                mass[b] += log_post(phi).exp();
            }
        }
        let total: f64 = mass.iter().sum();
        mass.iter_mut().for_each(|x| *x /= total);

        let mut corr = CorrelationStructure::new(Arc::clone(&distances), 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut hist = vec![0.0; bins];
        let n = 200_000;
        for _ in 0..n {
            let step =
                metropolis_update_phi(&corr, &m, s2, &distances, &pr, 1.5, &mut rng).unwrap();
            if let Some(c) = step.accepted {
                corr = c;
            }
            let b = (((corr.phi - pr.phi_lower) / width) as usize).min(bins - 1);
            hist[b] += 1.0 / n as f64;
        }
        let tv: f64 = 0.5
            * hist
                .iter()
                .zip(&mass)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        assert!(tv < 0.05, "total variation {tv}");
    }
}
