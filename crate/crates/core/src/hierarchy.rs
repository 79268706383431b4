//! The three model stages.
//!
//! Stage one fits the rural regression with spatial effects. Stage two draws
//! the background surface at new locations from each stage-one draw, with
//! the rural covariate block set to zero at urban sites. Stage three regresses
//! urban log concentrations minus the background on urban covariates, one
//! exact conjugate draw per upstream draw, so urban data never reach the
//! stage-one parameters.

use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateGroup, Dataset, TransformKind};
use crate::error::{Error, Result};
use crate::mcmc::{
    chain_rng, draw_variance, run_chains, streams, McmcConfig, PhiPriorSpec, PosteriorDraw,
    PosteriorSamples, PriorConfig, ScalarTrace, StageOneData,
};
use crate::spatial::{
    cross_distances, distance_matrix, CorrelationStructure, CrossCorrelation, Point,
};
use crate::stats::{mean, sample_variance, Interval};

/// Which covariate groups enter the stage-one design (always with an
/// intercept).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateSet {
    InterceptOnly,
    Global,
    #[default]
    GlobalRural,
}

impl CovariateSet {
    fn uses(self, group: CovariateGroup) -> bool {
        match group {
            CovariateGroup::Global => self != CovariateSet::InterceptOnly,
            CovariateGroup::Rural => self == CovariateSet::GlobalRural,
            CovariateGroup::Urban => false,
        }
    }
}

impl FromStr for CovariateSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intercept_only" => Ok(CovariateSet::InterceptOnly),
            "global" => Ok(CovariateSet::Global),
            "global_rural" => Ok(CovariateSet::GlobalRural),
            other => Err(Error::Config(format!(
                "unknown covariate set '{other}' (intercept_only, global, global_rural)"
            ))),
        }
    }
}

impl std::fmt::Display for CovariateSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CovariateSet::InterceptOnly => "intercept_only",
            CovariateSet::Global => "global",
            CovariateSet::GlobalRural => "global_rural",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub covariates: CovariateSet,
    pub coef_variance: f64,
    pub precision_shape: f64,
    pub precision_rate: f64,
    pub phi_prior: PhiPriorSpec,
    pub mcmc: McmcConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = PriorConfig::default();
        ModelConfig {
            covariates: CovariateSet::default(),
            coef_variance: p.coef_variance,
            precision_shape: p.precision_shape,
            precision_rate: p.precision_rate,
            phi_prior: PhiPriorSpec::default(),
            mcmc: McmcConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn prior(&self) -> Result<PriorConfig> {
        let prior = PriorConfig {
            coef_variance: self.coef_variance,
            precision_shape: self.precision_shape,
            precision_rate: self.precision_rate,
            ..PriorConfig::with_phi(self.phi_prior)?
        };
        prior.validate()?;
        Ok(prior)
    }
}

pub const INTERCEPT: &str = "intercept";

/// Reject designs whose columns are linearly dependent, naming the first
/// offending column and the earlier columns it is a combination of.
pub fn check_full_rank(design: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for j in 0..design.ncols() {
        let col = design.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col.clone();
        for _ in 0..2 {
            for q in &basis {
                v -= q * q.dot(&v);
            }
        }
        if norm0 == 0.0 {
            return Err(Error::Design(format!(
                "column '{}' is identically zero",
                names[j]
            )));
        }
        if v.norm() <= 1e-9 * norm0 {
            let earlier = design.columns(0, j).into_owned();
            let coef = earlier
                .svd(true, true)
                .solve(&col, 1e-12)
                .map_err(|e| Error::Design(e.to_string()))?;
            let scale = coef.amax();
            let partners: Vec<&str> = (0..j)
                .filter(|&k| coef[k].abs() > 1e-8 * scale)
                .map(|k| names[k].as_str())
                .collect();
            return Err(Error::Design(format!(
                "column '{}' is collinear with {}",
                names[j],
                partners.join(", ")
            )));
        }
        basis.push(v.normalize());
    }
    Ok(())
}

/// Stage-one inputs drawn from the rural training stations.
#[derive(Debug, Clone)]
pub struct StageOneSpec {
    pub station_ids: Vec<String>,
    pub covariates: CovariateSet,
    pub global_names: Vec<String>,
    pub rural_names: Vec<String>,
    /// Design columns produced by the bounded square-root transform.
    pub bounded_columns: Vec<String>,
    pub data: StageOneData,
}

impl StageOneSpec {
    pub fn n_coefficients(&self) -> usize {
        1 + self.global_names.len() + self.rural_names.len()
    }

    /// Design row for one dataset row; the rural block is zeroed unless
    /// `keep_rural`.
    fn design_row(&self, ds: &Dataset, row: usize, keep_rural: bool) -> Vec<f64> {
        let mut out = vec![1.0];
        if self.covariates.uses(CovariateGroup::Global) {
            out.extend(ds.covariates.group_row(row, CovariateGroup::Global).iter());
        }
        if self.covariates.uses(CovariateGroup::Rural) {
            let rural = ds.covariates.group_row(row, CovariateGroup::Rural);
            if keep_rural {
                out.extend(rural.iter());
            } else {
                out.extend(std::iter::repeat_n(0.0, rural.len()));
            }
        }
        out
    }

    fn design_for(&self, ds: &Dataset, idx: &[usize], keep_rural: bool) -> DMatrix<f64> {
        let p = self.n_coefficients();
        let mut x = DMatrix::zeros(idx.len(), p);
        for (r, &i) in idx.iter().enumerate() {
            for (c, v) in self.design_row(ds, i, keep_rural).into_iter().enumerate() {
                x[(r, c)] = v;
            }
        }
        x
    }
}

pub fn stage_one_spec(ds: &Dataset, covariates: CovariateSet) -> Result<StageOneSpec> {
    let pick = |g| {
        if covariates.uses(g) {
            ds.covariates.group_names(g).to_vec()
        } else {
            Vec::new()
        }
    };
    let global_names = pick(CovariateGroup::Global);
    let rural_names = pick(CovariateGroup::Rural);
    let mut coef_names = vec![INTERCEPT.to_string()];
    coef_names.extend(global_names.iter().cloned());
    coef_names.extend(rural_names.iter().cloned());
    let bounded_columns = ds
        .transforms
        .iter()
        .filter(|t| t.kind == TransformKind::MinMaxSqrt && coef_names.contains(&t.name))
        .map(|t| t.name.clone())
        .collect();

    let idx = ds.rural_training();
    let mut spec = StageOneSpec {
        station_ids: idx.iter().map(|&i| ds.stations[i].id.clone()).collect(),
        covariates,
        global_names,
        rural_names,
        bounded_columns,
        data: StageOneData {
            y: ds.log_means(&idx),
            design: DMatrix::zeros(0, 0),
            coef_names,
            points: ds.points(&idx),
            distances: Arc::new(DMatrix::zeros(0, 0)),
        },
    };
    let p = spec.n_coefficients();
    if idx.len() < 2 * p {
        return Err(Error::InsufficientData(format!(
            "{} rural training stations for {p} stage-one coefficients; need at least {}",
            idx.len(),
            2 * p
        )));
    }
    spec.data.design = spec.design_for(ds, &idx, true);
    check_full_rank(&spec.data.design, &spec.data.coef_names)?;
    spec.data.distances = Arc::new(distance_matrix(&spec.data.points));
    Ok(spec)
}

#[derive(Debug, Clone)]
pub struct StageOneFit {
    pub spec: StageOneSpec,
    pub prior: PriorConfig,
    pub samples: PosteriorSamples,
}

impl StageOneFit {
    pub fn seed(&self) -> u64 {
        self.samples.config_echo.seed
    }
}

pub fn fit_stage_one(ds: &Dataset, config: &ModelConfig) -> Result<StageOneFit> {
    let spec = stage_one_spec(ds, config.covariates)?;
    let prior = config.prior()?;
    let samples = run_chains(&spec.data, &prior, &config.mcmc)?;
    Ok(StageOneFit {
        spec,
        prior,
        samples,
    })
}

/// Locations and design rows (stage-one column layout) to predict at.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTargets {
    pub ids: Vec<String>,
    pub points: Vec<Point>,
    pub design: DMatrix<f64>,
}

impl PredictionTargets {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn select(&self, range: std::ops::Range<usize>) -> Self {
        PredictionTargets {
            ids: self.ids[range.clone()].to_vec(),
            points: self.points[range.clone()].to_vec(),
            design: self.design.rows(range.start, range.len()).into_owned(),
        }
    }
}

/// Urban stations, with every rural covariate set to exactly zero.
pub fn urban_targets(spec: &StageOneSpec, ds: &Dataset) -> PredictionTargets {
    targets_for(spec, ds, &ds.urban(), false)
}

/// Rural validation stations, covariates as observed.
pub fn validation_targets(spec: &StageOneSpec, ds: &Dataset) -> PredictionTargets {
    targets_for(spec, ds, &ds.rural_validation(), true)
}

fn targets_for(
    spec: &StageOneSpec,
    ds: &Dataset,
    idx: &[usize],
    keep_rural: bool,
) -> PredictionTargets {
    PredictionTargets {
        ids: idx.iter().map(|&i| ds.stations[i].id.clone()).collect(),
        points: ds.points(idx),
        design: spec.design_for(ds, idx, keep_rural),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    /// Add `N(0, sigma2_nu)` observation noise to each draw.
    pub include_noise: bool,
    /// Draw the spatial effects jointly across targets rather than one
    /// target at a time.
    pub joint: bool,
    pub stream: u64,
    /// Use at most this many upstream draws, thinned evenly within chains.
    pub max_draws: Option<usize>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            include_noise: false,
            joint: true,
            stream: streams::PREDICT,
            max_draws: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionResult {
    pub id: String,
    pub log_mean: f64,
    pub log_variance: f64,
    pub log_median: f64,
    pub ci95_log: (f64, f64),
    /// Concentration scale; exponentials of the log-scale quantiles.
    pub natural_median: f64,
    pub ci95_natural: (f64, f64),
}

impl PredictionResult {
    pub fn from_draws(id: impl Into<String>, log_draws: &[f64]) -> Self {
        let iv = Interval::from_draws(log_draws);
        PredictionResult {
            id: id.into(),
            log_mean: mean(log_draws),
            log_variance: sample_variance(log_draws),
            log_median: iv.median,
            ci95_log: (iv.lo, iv.hi),
            natural_median: iv.median.exp(),
            ci95_natural: (iv.lo.exp(), iv.hi.exp()),
        }
    }
}

/// Per-draw log-scale predictions, aligned with the upstream chains.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDraws {
    pub ids: Vec<String>,
    /// `chains[c][k][j]`: draw `k` of chain `c` at target `j`.
    pub chains: Vec<Vec<DVector<f64>>>,
}

impl PredictionDraws {
    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &DVector<f64>)> {
        self.chains
            .iter()
            .enumerate()
            .flat_map(|(c, ch)| ch.iter().map(move |v| (c, v)))
    }

    pub fn target_draws(&self, j: usize) -> Vec<f64> {
        self.iter().map(|(_, v)| v[j]).collect()
    }

    pub fn summarize(&self) -> Vec<PredictionResult> {
        self.ids
            .iter()
            .enumerate()
            .map(|(j, id)| PredictionResult::from_draws(id.clone(), &self.target_draws(j)))
            .collect()
    }
}

/// Square root `F` with `F F^T = a` for a positive semi-definite `a`; falls
/// back to an eigen decomposition when Cholesky fails.
fn psd_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = a.clone().cholesky() {
        return c.unpack();
    }
    let eig = a.clone().symmetric_eigen();
    let mut f = eig.eigenvectors;
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        f.column_mut(k).scale_mut(l.max(0.0).sqrt());
    }
    f
}

/// Kriging weights and conditional spread for one value of `phi`, with
/// unit spatial variance.
struct Kriging {
    phi: f64,
    corr: CorrelationStructure,
    /// `L^{-1} delta^T`, sites by targets.
    w: DMatrix<f64>,
    spread: Spread,
}

enum Spread {
    Joint(DMatrix<f64>),
    Marginal(DVector<f64>),
}

impl Kriging {
    fn new(
        phi: f64,
        site_distances: &Arc<DMatrix<f64>>,
        cross: &DMatrix<f64>,
        target_distances: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        let corr = CorrelationStructure::new(Arc::clone(site_distances), phi)?;
        let delta = CrossCorrelation::new(cross, phi).delta;
        let w = corr.whiten_columns(&delta.transpose());
        let spread = match target_distances {
            Some(td) => {
                let mut c = td.map(|d| (-phi * d).exp()) - w.tr_mul(&w);
                c = (&c + c.transpose()) * 0.5;
                Spread::Joint(psd_factor(&c))
            }
            None => Spread::Marginal(DVector::from_iterator(
                w.ncols(),
                w.column_iter()
                    .map(|col| (1.0 - col.norm_squared()).clamp(0.0, 1.0).sqrt()),
            )),
        };
        Ok(Kriging {
            phi,
            corr,
            w,
            spread,
        })
    }

    fn draw<R: Rng + ?Sized>(&self, m: &DVector<f64>, sigma2_m: f64, rng: &mut R) -> DVector<f64> {
        let t = self.w.ncols();
        let mean = self.w.tr_mul(&self.corr.whiten(m));
        let z = DVector::from_fn(t, |_, _| rng.sample::<f64, _>(StandardNormal));
        let scale = sigma2_m.max(0.0).sqrt();
        match &self.spread {
            Spread::Joint(f) => mean + f * z * scale,
            Spread::Marginal(sd) => mean + sd.component_mul(&z) * scale,
        }
    }
}

struct ChainStreams {
    spatial: ChaCha8Rng,
    noise: ChaCha8Rng,
}

fn thinned(draws: &[PosteriorDraw], keep: usize) -> Vec<&PosteriorDraw> {
    if keep >= draws.len() {
        return draws.iter().collect();
    }
    let step = draws.len().div_ceil(keep.max(1));
    draws.iter().step_by(step).collect()
}

fn predict_chain(
    fit: &StageOneFit,
    targets: &PredictionTargets,
    draws: &[&PosteriorDraw],
    opts: &PredictOptions,
    rngs: &mut ChainStreams,
) -> Result<Vec<DVector<f64>>> {
    let cross = cross_distances(&targets.points, &fit.spec.data.points);
    let target_d = opts.joint.then(|| distance_matrix(&targets.points));
    let mut cache: Option<Kriging> = None;
    let mut out = Vec::with_capacity(draws.len());
    for d in draws {
        if cache.as_ref().is_none_or(|k| k.phi != d.phi) {
            cache = Some(Kriging::new(
                d.phi,
                &fit.spec.data.distances,
                &cross,
                target_d.as_ref(),
            )?);
        }
        let kriging = cache.as_ref().expect("filled above");
        let spatial = kriging.draw(&d.m, d.sigma2_m, &mut rngs.spatial);
        let mut y = &targets.design * &d.beta + spatial;
        if opts.include_noise {
            let sd = d.sigma2_nu.sqrt();
            y.iter_mut()
                .for_each(|v| *v += sd * rngs.noise.sample::<f64, _>(StandardNormal));
        }
        out.push(y);
    }
    Ok(out)
}

fn chain_streams(fit: &StageOneFit, stream: u64) -> Vec<ChainStreams> {
    (0..fit.samples.n_chains())
        .map(|c| ChainStreams {
            spatial: chain_rng(fit.seed(), stream, c),
            noise: chain_rng(fit.seed(), stream + streams::NOISE, c),
        })
        .collect()
}

fn predict_with(
    fit: &StageOneFit,
    targets: &PredictionTargets,
    opts: &PredictOptions,
    rngs: &mut [ChainStreams],
) -> Result<PredictionDraws> {
    if targets.design.ncols() != fit.spec.n_coefficients() {
        return Err(Error::Design(format!(
            "target design has {} columns; stage one has {}",
            targets.design.ncols(),
            fit.spec.n_coefficients()
        )));
    }
    let n_chains = fit.samples.n_chains();
    let per_chain = opts.max_draws.map_or(usize::MAX, |m| (m / n_chains).max(1));
    let results: Vec<Result<Vec<DVector<f64>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = fit
            .samples
            .chains
            .iter()
            .zip(rngs.iter_mut())
            .map(|(chain, rng)| {
                scope.spawn(move || {
                    let draws = thinned(chain, per_chain);
                    predict_chain(fit, targets, &draws, opts, rng)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction thread panicked"))
            .collect()
    });
    Ok(PredictionDraws {
        ids: targets.ids.clone(),
        chains: results.into_iter().collect::<Result<_>>()?,
    })
}

/// Background surface draws at `targets`, one per stage-one draw.
pub fn predict_background(
    fit: &StageOneFit,
    targets: &PredictionTargets,
    opts: &PredictOptions,
) -> Result<PredictionDraws> {
    let mut rngs = chain_streams(fit, opts.stream);
    predict_with(fit, targets, opts, &mut rngs)
}

/// Grid cells with their global covariates, already transformed.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCells {
    pub points: Vec<Point>,
    pub global_names: Vec<String>,
    pub global: DMatrix<f64>,
}

const GRID_BLOCK: usize = 256;

/// Predict the background surface cell by cell. Rural covariates are zero.
/// `on_block` receives each finished block so callers can stream output.
pub fn predict_grid(
    fit: &StageOneFit,
    cells: &GridCells,
    max_draws: Option<usize>,
    mut on_block: impl FnMut(&[PredictionResult]) -> Result<()>,
) -> Result<Vec<String>> {
    let spec = &fit.spec;
    let mut col_of = Vec::with_capacity(spec.global_names.len());
    for name in &spec.global_names {
        match cells.global_names.iter().position(|n| n == name) {
            Some(k) => col_of.push(k),
            None => {
                return Err(Error::Schema {
                    file: "grid".into(),
                    message: format!("missing global covariate column '{name}'"),
                })
            }
        }
    }
    let n = cells.points.len();
    let mut warnings = Vec::new();
    for (j, name) in spec.global_names.iter().enumerate() {
        if !spec.bounded_columns.contains(name) {
            continue;
        }
        let outside = (0..n)
            .filter(|&i| !(0.0..=1.0).contains(&cells.global[(i, col_of[j])]))
            .count();
        if outside > 0 {
            warnings.push(format!(
                "{outside} grid cells have '{name}' outside [0, 1]; was the stored transform applied?"
            ));
        }
    }
    let p = spec.n_coefficients();
    let design = DMatrix::from_fn(n, p, |i, c| match c {
        0 => 1.0,
        c if c <= col_of.len() => cells.global[(i, col_of[c - 1])],
        _ => 0.0,
    });
    let all = PredictionTargets {
        ids: (0..n).map(|i| i.to_string()).collect(),
        points: cells.points.clone(),
        design,
    };
    let opts = PredictOptions {
        include_noise: false,
        joint: false,
        stream: streams::GRID,
        max_draws,
    };
    let mut rngs = chain_streams(fit, opts.stream);
    let mut start = 0;
    while start < n {
        let end = (start + GRID_BLOCK).min(n);
        let block = all.select(start..end);
        let draws = predict_with(fit, &block, &opts, &mut rngs)?;
        on_block(&draws.summarize())?;
        start = end;
    }
    Ok(warnings)
}

/// Urban residual regression inputs: log concentrations and the design
/// `[1, W]` at urban stations.
#[derive(Debug, Clone, PartialEq)]
pub struct StageThreeSpec {
    pub station_ids: Vec<String>,
    pub coef_names: Vec<String>,
    pub z: DVector<f64>,
    pub design: DMatrix<f64>,
}

pub fn stage_three_spec(ds: &Dataset) -> Result<StageThreeSpec> {
    let idx = ds.urban();
    let urban_names = ds.covariates.group_names(CovariateGroup::Urban);
    let mut coef_names = vec![INTERCEPT.to_string()];
    coef_names.extend(urban_names.iter().cloned());
    let p = coef_names.len();
    if idx.len() < p + 1 {
        return Err(Error::InsufficientData(format!(
            "{} urban stations for {p} stage-three coefficients",
            idx.len()
        )));
    }
    let mut design = DMatrix::from_element(idx.len(), p, 1.0);
    for (r, &i) in idx.iter().enumerate() {
        let w = ds.covariates.group_row(i, CovariateGroup::Urban);
        design
            .view_mut((r, 1), (1, p - 1))
            .copy_from(&w.transpose());
    }
    check_full_rank(&design, &coef_names)?;
    Ok(StageThreeSpec {
        station_ids: idx.iter().map(|&i| ds.stations[i].id.clone()).collect(),
        coef_names,
        z: ds.log_means(&idx),
        design,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UrbanDraw {
    pub gamma: DVector<f64>,
    pub sigma2_omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UrbanSamples {
    pub coef_names: Vec<String>,
    /// Aligned with the upstream chains and draws.
    pub chains: Vec<Vec<UrbanDraw>>,
}

impl UrbanSamples {
    pub fn scalar_trace(&self) -> ScalarTrace {
        let mut names: Vec<String> = self
            .coef_names
            .iter()
            .map(|n| format!("gamma[{n}]"))
            .collect();
        names.push("sigma2_omega".into());
        let values = self
            .chains
            .iter()
            .map(|chain| {
                let mut cols = vec![Vec::with_capacity(chain.len()); names.len()];
                for d in chain {
                    for (k, &g) in d.gamma.iter().enumerate() {
                        cols[k].push(g);
                    }
                    cols[names.len() - 1].push(d.sigma2_omega);
                }
                cols
            })
            .collect();
        ScalarTrace { names, values }
    }

    /// Posterior of the urban intercept on the log scale and as a
    /// multiplicative increment on the concentration scale.
    pub fn increment(&self) -> UrbanIncrement {
        let g0: Vec<f64> = self.chains.iter().flatten().map(|d| d.gamma[0]).collect();
        let log = Interval::from_draws(&g0);
        UrbanIncrement {
            log,
            natural: log.map(f64::exp),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UrbanIncrement {
    pub log: Interval,
    pub natural: Interval,
}

/// One conjugate normal-inverse-gamma draw of `(gamma, sigma2_omega)` per
/// background draw, with `gamma | sigma2_omega ~ N(mean, sigma2_omega *
/// coef_variance * I)` and a Gamma prior on the precision.
pub fn fit_stage_three(
    spec: &StageThreeSpec,
    background: &PredictionDraws,
    prior: &PriorConfig,
    seed: u64,
) -> Result<UrbanSamples> {
    let w = &spec.design;
    let p = w.ncols();
    if background.ids != spec.station_ids {
        return Err(Error::Design(
            "background draws are not aligned with the urban stations".into(),
        ));
    }
    let mut precision = w.tr_mul(w);
    for k in 0..p {
        precision[(k, k)] += 1.0 / prior.coef_variance;
    }
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Design("urban design is rank deficient".into()))?;
    let l = chol.l();
    let prior_shift = DVector::from_element(p, prior.coef_mean / prior.coef_variance);
    let prior_ss = p as f64 * prior.coef_mean * prior.coef_mean / prior.coef_variance;

    let chains = background
        .chains
        .iter()
        .enumerate()
        .map(|(c, chain)| {
            let mut rng = chain_rng(seed, streams::STAGE_THREE, c);
            chain
                .iter()
                .map(|yhat| {
                    let r = &spec.z - yhat;
                    let post_mean = chol.solve(&(w.tr_mul(&r) + &prior_shift));
                    let ss = (r.norm_squared() + prior_ss
                        - post_mean.dot(&(&precision * &post_mean)))
                    .max(0.0);
                    let sigma2 = draw_variance(prior, r.len(), ss, &mut rng);
                    let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let dev = l.tr_solve_lower_triangular(&z).expect("positive diagonal");
                    UrbanDraw {
                        gamma: post_mean + dev * sigma2.sqrt(),
                        sigma2_omega: sigma2,
                    }
                })
                .collect()
        })
        .collect();
    Ok(UrbanSamples {
        coef_names: spec.coef_names.clone(),
        chains,
    })
}
