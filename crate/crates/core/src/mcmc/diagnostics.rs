use crate::error::{Error, Result};
use crate::stats::{mean, sample_variance, Interval};

const MIN_DRAWS: usize = 10;

/// Potential scale reduction factor `sqrt(((n-1)/n W + B/n) / W)` from
/// per-chain traces of one scalar.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Diagnostics(format!(
            "Gelman-Rubin needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Diagnostics("chains have unequal lengths".into()));
    }
    if n < MIN_DRAWS {
        return Err(Error::Diagnostics(format!(
            "Gelman-Rubin needs at least {MIN_DRAWS} draws per chain, got {n}"
        )));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let between_over_n = sample_variance(&means);
    let within = mean(
        &chains
            .iter()
            .map(|c| sample_variance(c))
            .collect::<Vec<_>>(),
    );
    let nf = n as f64;
    if within == 0.0 {
        return Ok(if between_over_n == 0.0 {
            1.0
        } else {
            f64::INFINITY
        });
    }
    let pooled = (nf - 1.0) / nf * within + between_over_n;
    Ok((pooled / within).sqrt())
}

/// Scalar traces of named parameters, `values[chain][param][iteration]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarTrace {
    pub names: Vec<String>,
    pub values: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub interval: Interval,
    /// `None` when fewer than two chains (or too few draws) are available.
    pub rhat: Option<f64>,
}

impl ScalarTrace {
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn per_chain(&self, param: usize) -> Vec<Vec<f64>> {
        self.values.iter().map(|c| c[param].clone()).collect()
    }

    pub fn pooled(&self, param: usize) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|c| c[param].iter().copied())
            .collect()
    }

    pub fn rhat(&self, param: usize) -> Result<f64> {
        gelman_rubin(&self.per_chain(param))
    }

    pub fn summary(&self) -> Vec<ParamSummary> {
        (0..self.names.len())
            .map(|p| ParamSummary {
                name: self.names[p].clone(),
                interval: Interval::from_draws(&self.pooled(p)),
                rhat: self.rhat(p).ok(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn normal_chain(mu: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mu, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn identical_chains() {
        let c = normal_chain(0.0, 500, 1);
        let r = gelman_rubin(&[c.clone(), c]).unwrap();
        assert!(r <= 1.0 + 1e-12);
    }

    #[test]
    fn same_distribution_converges() {
        let r =
            gelman_rubin(&[normal_chain(0.0, 10_000, 2), normal_chain(0.0, 10_000, 3)]).unwrap();
        assert!(r < 1.01, "{r}");
    }

    #[test]
    fn separated_chains_flagged() {
        let r = gelman_rubin(&[normal_chain(0.0, 1000, 4), normal_chain(10.0, 1000, 5)]).unwrap();
        assert!(r > 5.0, "{r}");
        // analytic: B/n = 50, W = 1 -> sqrt(0.999 + 50)
        assert!((r - (0.999f64 + 50.0).sqrt()).abs() < 0.5);
    }

    #[test]
    fn insufficient_inputs() {
        assert!(gelman_rubin(&[normal_chain(0.0, 100, 1)]).is_err());
        assert!(gelman_rubin(&[vec![1.0; 5], vec![1.0; 5]]).is_err());
        assert!(gelman_rubin(&[vec![1.0; 20], vec![1.0; 19]]).is_err());
    }
}
