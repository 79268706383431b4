//! Forward simulation of the full generative model, used as the
//! ground-truth oracle for recovery and calibration tests.
//!
//! Rural sites: `log y = beta0 + X_G beta_G + X_R beta_R + m + nu`.
//! Urban sites: `log z = beta0 + X_G beta_G + m + gamma0 + W gamma + omega`,
//! with `m` one joint Gaussian-process draw over all sites.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateTable, Dataset, Role, SiteClass, Station, TransformSpec};
use crate::error::{Error, Result};
use crate::mcmc::{chain_rng, streams};
use crate::spatial::{sample_mvn_zero_mean, CorrelationStructure, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn square(size_km: f64) -> Self {
        Region {
            x_min: 0.0,
            x_max: size_km,
            y_min: 0.0,
            y_max: size_km,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub n_rural: usize,
    pub n_urban: usize,
    /// Share of rural sites labelled as validation sites.
    pub validation_fraction: f64,
    pub region: Region,
    /// Intercept, then one coefficient per global covariate, then one per
    /// rural covariate.
    pub beta: Vec<f64>,
    pub n_global: usize,
    /// Urban intercept, then one coefficient per urban covariate.
    pub gamma: Vec<f64>,
    pub sigma2_nu: f64,
    pub sigma2_m: f64,
    pub sigma2_omega: f64,
    pub phi: f64,
    /// Urban covariates are drawn uniformly from `[0, urban_covariate_max]`;
    /// global and rural ones from `[0, 1]`.
    pub urban_covariate_max: f64,
    /// Fixed site coordinates (rural first, then urban); drawn uniformly
    /// over `region` when absent.
    pub locations: Option<Vec<Point>>,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            n_rural: 200,
            n_urban: 100,
            validation_fraction: 0.25,
            region: Region::square(1000.0),
            beta: vec![2.6, -1.0, 0.5],
            n_global: 1,
            gamma: vec![3.294, 0.0623],
            sigma2_nu: 0.09,
            sigma2_m: 0.25,
            sigma2_omega: 0.04,
            phi: 0.01,
            urban_covariate_max: 5.0,
            locations: None,
            seed: 1,
        }
    }
}

impl SimSpec {
    pub fn n_rural_covariates(&self) -> usize {
        self.beta.len().saturating_sub(1 + self.n_global)
    }

    pub fn n_urban_covariates(&self) -> usize {
        self.gamma.len().saturating_sub(1)
    }

    pub fn global_names(&self) -> Vec<String> {
        (1..=self.n_global).map(|k| format!("global_{k}")).collect()
    }

    pub fn rural_names(&self) -> Vec<String> {
        (1..=self.n_rural_covariates())
            .map(|k| format!("rural_{k}"))
            .collect()
    }

    pub fn urban_names(&self) -> Vec<String> {
        (1..=self.n_urban_covariates())
            .map(|k| format!("urban_{k}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.sigma2_nu, self.sigma2_m, self.sigma2_omega, self.phi];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config(
                "variance components and phi must be positive".into(),
            ));
        }
        if self.n_rural == 0 || self.n_urban == 0 {
            return Err(Error::Config("site counts must be at least 1".into()));
        }
        if self.beta.len() < 1 + self.n_global || self.gamma.is_empty() {
            return Err(Error::Config(
                "beta needs an intercept plus global coefficients; gamma an intercept".into(),
            ));
        }
        if self
            .locations
            .as_ref()
            .is_some_and(|l| l.len() != self.n_rural + self.n_urban)
        {
            return Err(Error::Config(
                "locations must list every rural and urban site".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

pub fn simulate(spec: &SimSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = chain_rng(spec.seed, streams::SIMULATE, 0);
    let n = spec.n_rural + spec.n_urban;
    let r = &spec.region;
    let points: Vec<Point> = match &spec.locations {
        Some(l) => l.clone(),
        None => (0..n)
            .map(|_| {
                (
                    r.x_min + (r.x_max - r.x_min) * rng.random::<f64>(),
                    r.y_min + (r.y_max - r.y_min) * rng.random::<f64>(),
                )
            })
            .collect(),
    };

    let (g, rc, u) = (
        spec.n_global,
        spec.n_rural_covariates(),
        spec.n_urban_covariates(),
    );
    let mut values = DMatrix::zeros(n, g + rc + u);
    for i in 0..n {
        for j in 0..g + rc {
            values[(i, j)] = rng.random::<f64>();
        }
        for j in g + rc..g + rc + u {
            values[(i, j)] = spec.urban_covariate_max * rng.random::<f64>();
        }
    }

    let corr = CorrelationStructure::from_points(&points, spec.phi)?;
    let m = sample_mvn_zero_mean(spec.sigma2_m, &corr, &mut rng);

    let n_validation = (spec.n_rural as f64 * spec.validation_fraction).round() as usize;
    let n_training = spec.n_rural - n_validation;
    let mut stations = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let background = spec.beta[0]
            + (0..g)
                .map(|j| spec.beta[1 + j] * values[(i, j)])
                .sum::<f64>()
            + m[i];
        let (id, class, role, log_value) = if i < spec.n_rural {
            let rural_part: f64 = (0..rc)
                .map(|j| spec.beta[1 + g + j] * values[(i, g + j)])
                .sum();
            let nu = spec.sigma2_nu.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let role = if i < n_training {
                Role::Training
            } else {
                Role::Validation
            };
            (
                format!("R{:04}", i + 1),
                SiteClass::Rural,
                role,
                background + rural_part + nu,
            )
        } else {
            let urban_part: f64 = spec.gamma[0]
                + (0..u)
                    .map(|j| spec.gamma[1 + j] * values[(i, g + rc + j)])
                    .sum::<f64>();
            let omega = spec.sigma2_omega.sqrt() * rng.sample::<f64, _>(StandardNormal);
            (
                format!("U{:04}", i - spec.n_rural + 1),
                SiteClass::Urban,
                Role::Training,
                background + urban_part + omega,
            )
        };
        ids.push(id.clone());
        stations.push(Station {
            id,
            x_km: points[i].0,
            y_km: points[i].1,
            site_class: class,
            role,
            annual_mean: log_value.exp(),
        });
    }

    let table = CovariateTable::new(
        ids,
        spec.global_names(),
        spec.rural_names(),
        spec.urban_names(),
        values,
    )?;
    let transforms = table.names().map(TransformSpec::identity).collect();
    Dataset::new(stations, table, transforms, None)
}
