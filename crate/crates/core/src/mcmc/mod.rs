//! Multi-chain Metropolis-within-Gibbs sampler for the stage-one model.
//!
//! Each sweep updates, in order: the nugget variance by a random-walk
//! Metropolis step with the spatial effects integrated out, the regression
//! coefficients (also with the effects integrated out), the spatial effects,
//! both variances (exact conjugate draws), then `phi` by a random-walk
//! Metropolis step on its logit scale. Both proposal scales adapt during
//! burn-in only.

mod collapsed;
mod config;
mod diagnostics;
mod gibbs;
mod phi;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use collapsed::{
    beta_marginal_conditional, marginal_factor, metropolis_update_nugget, NuggetStep,
};
pub use config::{McmcConfig, PhiPriorSpec, PriorConfig};
pub use diagnostics::{gelman_rubin, ParamSummary, ScalarTrace};
pub use gibbs::{
    beta_conditional, draw_variance, gibbs_update_beta, gibbs_update_precisions,
    gibbs_update_spatial, spatial_conditional_moments, GaussianConditional,
};
pub use phi::{
    acceptance_probability, from_logit, metropolis_accept, metropolis_update_phi, to_logit, PhiStep,
};

use crate::error::{Error, Result};
use crate::spatial::{CorrelationStructure, Point};

/// Random-number stream offsets; chain `c` of a stage uses stream `base + c`.
pub mod streams {
    pub const STAGE_ONE: u64 = 0;
    pub const PREDICT: u64 = 1 << 20;
    /// Added to a prediction stream for its observation-noise draws, so the
    /// surface draws do not depend on whether noise is requested.
    pub const NOISE: u64 = 1 << 19;
    pub const STAGE_THREE: u64 = 3 << 20;
    pub const VALIDATE: u64 = 4 << 20;
    pub const GRID: u64 = 5 << 20;
    pub const SIMULATE: u64 = 6 << 20;
}

/// Counter-based generator for one chain of one stage.
pub fn chain_rng(seed: u64, stream_base: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_base + chain as u64);
    rng
}

/// Inputs of the stage-one regression with spatial random effects.
#[derive(Debug, Clone)]
pub struct StageOneData {
    /// Log concentrations.
    pub y: DVector<f64>,
    /// Intercept column first.
    pub design: DMatrix<f64>,
    pub coef_names: Vec<String>,
    pub points: Vec<Point>,
    pub distances: Arc<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraw {
    pub beta: DVector<f64>,
    pub m: DVector<f64>,
    pub sigma2_nu: f64,
    pub sigma2_m: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    /// `chains[c][k]` is the `k`-th retained draw of chain `c`.
    pub chains: Vec<Vec<PosteriorDraw>>,
    /// Post-burn-in acceptance rate of the `phi` step per chain.
    pub accept_rate_phi: Vec<f64>,
    pub proposal_sd_phi: Vec<f64>,
    /// Number of adaptation updates applied per chain; equals the burn-in.
    pub adaptation_updates: Vec<usize>,
    pub coef_names: Vec<String>,
    pub config_echo: McmcConfig,
}

impl PosteriorSamples {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draws(&self) -> impl Iterator<Item = (usize, &PosteriorDraw)> {
        self.chains
            .iter()
            .enumerate()
            .flat_map(|(c, ch)| ch.iter().map(move |d| (c, d)))
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    /// Named scalar parameters: coefficients, variances, `sigma_m`, `phi`,
    /// and optionally each spatial effect.
    pub fn scalar_trace(&self, include_spatial: bool) -> ScalarTrace {
        let mut names: Vec<String> = self
            .coef_names
            .iter()
            .map(|n| format!("beta[{n}]"))
            .collect();
        names.extend(["sigma2_nu", "sigma2_m", "sigma_m", "phi"].map(String::from));
        let n_sites = self
            .chains
            .first()
            .and_then(|c| c.first())
            .map_or(0, |d| d.m.len());
        if include_spatial {
            names.extend((0..n_sites).map(|i| format!("m[{i}]")));
        }
        let values = self
            .chains
            .iter()
            .map(|chain| {
                let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(chain.len()); names.len()];
                for d in chain {
                    let mut k = 0;
                    let mut push = |v: f64| {
                        cols[k].push(v);
                        k += 1;
                    };
                    d.beta.iter().for_each(|&b| push(b));
                    push(d.sigma2_nu);
                    push(d.sigma2_m);
                    push(d.sigma2_m.sqrt());
                    push(d.phi);
                    if include_spatial {
                        d.m.iter().for_each(|&v| push(v));
                    }
                }
                cols
            })
            .collect();
        ScalarTrace { names, values }
    }
}

struct ChainOutput {
    draws: Vec<PosteriorDraw>,
    accept_rate: f64,
    proposal_sd: f64,
    adaptation_updates: usize,
}

/// Least-squares coefficients and their standard errors.
fn least_squares(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let (n, p) = x.shape();
    let chol = x
        .tr_mul(x)
        .cholesky()
        .ok_or_else(|| Error::Design("design matrix is rank deficient".into()))?;
    let beta = chol.solve(&x.tr_mul(y));
    let rss = (y - x * &beta).norm_squared();
    let s2 = if n > p { rss / (n - p) as f64 } else { 1.0 };
    let inv = chol.inverse();
    let se = DVector::from_fn(p, |k, _| (s2 * inv[(k, k)]).sqrt());
    Ok((beta, se))
}

fn initial_state(
    data: &StageOneData,
    prior: &PriorConfig,
    chain: usize,
) -> Result<(PosteriorDraw, f64)> {
    let (beta, se) = least_squares(&data.y, &data.design)?;
    let geo_mean = (prior.phi_lower * prior.phi_upper).sqrt();
    let theta = to_logit(geo_mean, prior.phi_lower, prior.phi_upper);
    let sign = match chain {
        0 => 0.0,
        c if c % 2 == 1 => 1.0,
        _ => -1.0,
    };
    let draw = PosteriorDraw {
        beta: beta + se * (2.0 * sign),
        m: DVector::zeros(data.y.len()),
        sigma2_nu: sign.exp(),
        sigma2_m: (-sign).exp(),
        phi: from_logit(theta + 2.0 * sign, prior.phi_lower, prior.phi_upper),
    };
    Ok((draw, theta))
}

fn run_chain(
    data: &StageOneData,
    prior: &PriorConfig,
    config: &McmcConfig,
    chain: usize,
) -> Result<ChainOutput> {
    let mut rng = chain_rng(config.seed, streams::STAGE_ONE, chain);
    let (mut state, _) = initial_state(data, prior, chain)?;
    let mut corr = CorrelationStructure::new(Arc::clone(&data.distances), state.phi)
        .map_err(|e| e.with_context(format!("chain {chain} initialisation")))?;
    let mut log_sd = config.proposal_sd_init.ln();
    let mut nugget_log_sd = 0.0f64;
    let mut adaptation_updates = 0;
    let mut accepted = 0usize;
    let total = config.burn_in + config.samples * config.thin;
    let mut draws = Vec::with_capacity(config.samples);

    for iter in 0..total {
        let ctx = |e: Error| e.with_context(format!("chain {chain}, iteration {iter}"));
        let nugget = metropolis_update_nugget(
            &(&data.y - &data.design * &state.beta),
            state.sigma2_nu,
            state.sigma2_m,
            &corr,
            prior,
            nugget_log_sd.exp(),
            &mut rng,
        )
        .map_err(ctx)?;
        state.sigma2_nu = nugget.sigma2_nu;
        let factor = marginal_factor(&corr, state.sigma2_nu, state.sigma2_m).map_err(ctx)?;
        state.beta = beta_marginal_conditional(&data.y, &data.design, &factor, prior)
            .map_err(ctx)?
            .sample(&mut rng);
        let fitted = &data.design * &state.beta;
        let resid = &data.y - &fitted;
        state.m = gibbs_update_spatial(&resid, state.sigma2_nu, state.sigma2_m, &corr, &mut rng)
            .map_err(ctx)?;
        let nu = &resid - &state.m;
        let (s2_nu, s2_m) = gibbs_update_precisions(&nu, &state.m, &corr, prior, &mut rng);
        state.sigma2_nu = s2_nu;
        state.sigma2_m = s2_m;

        let step = metropolis_update_phi(
            &corr,
            &state.m,
            state.sigma2_m,
            &data.distances,
            prior,
            log_sd.exp(),
            &mut rng,
        )
        .map_err(ctx)?;
        let was_accepted = step.accepted.is_some();
        if let Some(next) = step.accepted {
            corr = next;
            state.phi = corr.phi;
        }

        if iter < config.burn_in {
            let rate = (iter as f64 + 1.0).powf(-0.6);
            log_sd += rate * (step.acceptance_probability - config.adapt_target_accept);
            log_sd = log_sd.clamp(-12.0, 3.0);
            nugget_log_sd += rate * (nugget.acceptance_probability - config.adapt_target_accept);
            nugget_log_sd = nugget_log_sd.clamp(-12.0, 3.0);
            adaptation_updates += 1;
        } else {
            accepted += usize::from(was_accepted);
            if (iter - config.burn_in + 1) % config.thin == 0 {
                draws.push(state.clone());
            }
        }
    }

    Ok(ChainOutput {
        draws,
        accept_rate: accepted as f64 / (config.samples * config.thin) as f64,
        proposal_sd: log_sd.exp(),
        adaptation_updates,
    })
}

/// Run `config.chains` independent chains (concurrently, one thread each).
/// Output is a deterministic function of the inputs and seed.
pub fn run_chains(
    data: &StageOneData,
    prior: &PriorConfig,
    config: &McmcConfig,
) -> Result<PosteriorSamples> {
    prior.validate()?;
    config.validate()?;
    if data.y.len() != data.design.nrows() || data.y.len() != data.points.len() {
        return Err(Error::Design(
            "response, design and coordinates disagree in length".into(),
        ));
    }
    let outputs: Vec<Result<ChainOutput>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.chains)
            .map(|c| scope.spawn(move || run_chain(data, prior, config, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    });
    let mut samples = PosteriorSamples {
        chains: Vec::with_capacity(config.chains),
        accept_rate_phi: Vec::new(),
        proposal_sd_phi: Vec::new(),
        adaptation_updates: Vec::new(),
        coef_names: data.coef_names.clone(),
        config_echo: *config,
    };
    for out in outputs {
        let out = out?;
        samples.chains.push(out.draws);
        samples.accept_rate_phi.push(out.accept_rate);
        samples.proposal_sd_phi.push(out.proposal_sd);
        samples.adaptation_updates.push(out.adaptation_updates);
    }
    Ok(samples)
}
