//! Command-line front end.
//!
//! Settings come from an optional TOML file (`--config`) overlaid by flags.
//! Each run writes `manifest.toml` with the fully resolved settings; passing
//! it back through `--config` reproduces the run.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_dataset, write_dataset, Dataset, DatasetPaths, LoadOptions, SiteClass, TransformKind,
};
use crate::error::{Error, Result};
use crate::hierarchy::{
    fit_stage_one, fit_stage_three, predict_background, predict_grid, stage_one_spec,
    stage_three_spec, urban_targets, CovariateSet, GridCells, ModelConfig, PredictOptions,
    StageOneFit,
};
use crate::mcmc::{McmcConfig, PhiPriorSpec};
use crate::output::{self, CsvOut, RunHeader, PREDICTION_COLUMNS};
use crate::synthetic::{simulate, SimSpec};
use crate::validation::{validate, ValidationOptions};
use crate::variogram::{empirical_variogram, fit_exponential_variogram, BinSpec, Direction};

/// Environment variable giving the default output directory.
pub const OUT_ENV: &str = "GEOHIER_OUT";
const R_HAT_LIMIT: f64 = 1.1;

#[derive(Debug, Parser)]
#[command(
    name = "geohier",
    version,
    about = "Hierarchical geostatistical model for pollutant concentrations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and transform a dataset, writing design-ready files.
    Ingest {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Empirical semivariogram of rural log concentrations with an
    /// exponential fit.
    Variogram {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        vario: VariogramArgs,
    },
    /// Fit the rural stage and write posterior draws and summaries.
    Fit(ModelRun),
    /// Predict the background surface at urban stations.
    Predict {
        #[command(flatten)]
        run: ModelRun,
        /// Add observation noise to the predictive draws.
        #[arg(long)]
        include_noise: bool,
    },
    /// Predict the background surface over a grid of cells.
    Grid {
        #[command(flatten)]
        run: ModelRun,
        /// Grid file with columns x_km,y_km and the global covariates.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        max_draws: Option<usize>,
    },
    /// Score predictions at the rural validation stations.
    Validate {
        #[command(flatten)]
        run: ModelRun,
        /// Use surface intervals (no observation noise) for coverage.
        #[arg(long)]
        surface_coverage: bool,
        #[arg(long)]
        max_draws: Option<usize>,
    },
    /// Run all stages and the validation.
    Pipeline {
        #[command(flatten)]
        run: ModelRun,
        /// Stop after the background predictions.
        #[arg(long)]
        no_stage3: bool,
        /// Add observation noise to the urban predictive draws.
        #[arg(long)]
        include_noise: bool,
    },
    /// Simulate a dataset from the generative model.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// TOML file with simulation settings.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n_rural: Option<usize>,
        #[arg(long)]
        n_urban: Option<usize>,
    },
    /// Convergence summary of a draws file.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        draws: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default from GEOHIER_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding stations.csv, covariates.csv and grouping.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    pca_components: Option<usize>,
}

#[derive(Debug, Args)]
struct McmcArgs {
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    phi_rho: Option<f64>,
    #[arg(long)]
    phi_d_near: Option<f64>,
    #[arg(long)]
    phi_d_far: Option<f64>,
    /// intercept_only, global or global_rural.
    #[arg(long)]
    covariates: Option<CovariateSet>,
}

#[derive(Debug, Args)]
struct ModelRun {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    mcmc: McmcArgs,
}

#[derive(Debug, Args)]
struct VariogramArgs {
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    max_distance: Option<f64>,
    /// Azimuth in degrees clockwise from north.
    #[arg(long)]
    direction: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Use residuals from a least-squares fit on the stage-one covariates.
    #[arg(long)]
    detrend: bool,
    #[arg(long)]
    covariates: Option<CovariateSet>,
}

/// Settings file and manifest layout. Every key is optional; absent keys
/// take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    pub command: Option<String>,
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    pub chains: Option<usize>,
    pub burn_in: Option<usize>,
    pub samples: Option<usize>,
    pub thin: Option<usize>,
    pub proposal_sd_init: Option<f64>,
    pub adapt_target_accept: Option<f64>,
    pub phi_rho: Option<f64>,
    pub phi_d_near: Option<f64>,
    pub phi_d_far: Option<f64>,
    pub covariates: Option<CovariateSet>,
    pub coef_variance: Option<f64>,
    pub precision_shape: Option<f64>,
    pub precision_rate: Option<f64>,
    pub pca_components: Option<usize>,
    pub include_noise: Option<bool>,
    pub no_stage3: Option<bool>,
    pub surface_coverage: Option<bool>,
    pub max_draws: Option<usize>,
    pub grid: Option<PathBuf>,
    pub draws: Option<PathBuf>,
    pub bins: Option<usize>,
    pub max_distance: Option<f64>,
    pub direction: Option<f64>,
    pub tolerance: Option<f64>,
    pub detrend: Option<bool>,
    pub simulation: Option<SimSpec>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($field:ident),* $(,)?) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field; } )*
    };
}

impl RunFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn overlay(mut self, top: RunFile) -> Self {
        overlay!(self, top; command, data, seed, chains, burn_in, samples, thin,
            proposal_sd_init, adapt_target_accept, phi_rho, phi_d_near, phi_d_far,
            covariates, coef_variance, precision_shape, precision_rate, pca_components,
            include_noise, no_stage3, surface_coverage, max_draws, grid, draws, bins,
            max_distance, direction, tolerance, detrend, simulation);
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        let d = ModelConfig::default();
        let m = McmcConfig::default();
        let p = PhiPriorSpec::default();
        ModelConfig {
            covariates: self.covariates.unwrap_or(d.covariates),
            coef_variance: self.coef_variance.unwrap_or(d.coef_variance),
            precision_shape: self.precision_shape.unwrap_or(d.precision_shape),
            precision_rate: self.precision_rate.unwrap_or(d.precision_rate),
            phi_prior: PhiPriorSpec {
                rho: self.phi_rho.unwrap_or(p.rho),
                d_near_km: self.phi_d_near.unwrap_or(p.d_near_km),
                d_far_km: self.phi_d_far.unwrap_or(p.d_far_km),
            },
            mcmc: McmcConfig {
                chains: self.chains.unwrap_or(m.chains),
                burn_in: self.burn_in.unwrap_or(m.burn_in),
                samples: self.samples.unwrap_or(m.samples),
                thin: self.thin.unwrap_or(m.thin),
                seed: self.seed.unwrap_or(m.seed),
                proposal_sd_init: self.proposal_sd_init.unwrap_or(m.proposal_sd_init),
                adapt_target_accept: self.adapt_target_accept.unwrap_or(m.adapt_target_accept),
            },
        }
    }

    /// Fill the model keys with their resolved values.
    fn with_model(mut self, m: &ModelConfig, pca_components: usize) -> Self {
        self.seed = Some(m.mcmc.seed);
        self.chains = Some(m.mcmc.chains);
        self.burn_in = Some(m.mcmc.burn_in);
        self.samples = Some(m.mcmc.samples);
        self.thin = Some(m.mcmc.thin);
        self.proposal_sd_init = Some(m.mcmc.proposal_sd_init);
        self.adapt_target_accept = Some(m.mcmc.adapt_target_accept);
        self.phi_rho = Some(m.phi_prior.rho);
        self.phi_d_near = Some(m.phi_prior.d_near_km);
        self.phi_d_far = Some(m.phi_prior.d_far_km);
        self.covariates = Some(m.covariates);
        self.coef_variance = Some(m.coef_variance);
        self.precision_shape = Some(m.precision_shape);
        self.precision_rate = Some(m.precision_rate);
        self.pca_components = Some(pca_components);
        self
    }

    fn load_options(&self) -> LoadOptions {
        LoadOptions {
            pca_components: self
                .pca_components
                .unwrap_or(LoadOptions::default().pca_components),
        }
    }

    /// Header for output files. Run-mode switches that do not change any
    /// stage's output are left out of the hash.
    fn header(&self, seed: u64) -> Result<RunHeader> {
        let hashed = RunFile {
            no_stage3: None,
            ..self.clone()
        };
        RunHeader::new(seed, &hashed)
    }
}

impl CommonArgs {
    fn flags(&self) -> RunFile {
        RunFile {
            seed: self.seed,
            ..RunFile::default()
        }
    }
}

impl DataArgs {
    fn apply(&self, f: &mut RunFile) {
        f.data.clone_from(&self.data);
        f.pca_components = self.pca_components;
    }
}

impl McmcArgs {
    fn apply(&self, f: &mut RunFile) {
        f.chains = self.chains;
        f.burn_in = self.burn_in;
        f.samples = self.samples;
        f.thin = self.thin;
        f.phi_rho = self.phi_rho;
        f.phi_d_near = self.phi_d_near;
        f.phi_d_far = self.phi_d_far;
        f.covariates = self.covariates;
    }
}

fn some_if(flag: bool) -> Option<bool> {
    flag.then_some(true)
}

/// Parse arguments, run, and return the process exit code. Errors are
/// reported on stderr as a single `error[CODE]: message` line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return 4;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn resolve(common: &CommonArgs, command: &str, mut flags: RunFile) -> Result<(RunFile, PathBuf)> {
    let base = match &common.config {
        Some(p) => RunFile::read(p)?,
        None => RunFile::default(),
    };
    flags.command = Some(command.to_string());
    let merged = base.overlay(common.flags()).overlay(flags);
    let out = match &common.out {
        Some(o) => o.clone(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                Error::Config(format!("no output directory: pass --out or set {OUT_ENV}"))
            })?,
    };
    Ok((merged, out))
}

fn load(settings: &RunFile) -> Result<Dataset> {
    let dir = settings
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("--data is required".into()))?;
    load_dataset(&DatasetPaths::in_dir(dir), &settings.load_options())
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_manifest(out: &Path, header: &RunHeader, settings: &RunFile) -> Result<()> {
    let body = toml::to_string(settings).map_err(|e| Error::Config(e.to_string()))?;
    output::write_text(&out.join("manifest.toml"), header, &body)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { common, data } => {
            let mut f = RunFile::default();
            data.apply(&mut f);
            let (s, out) = resolve(&common, "ingest", f)?;
            cmd_ingest(s, &out)
        }
        Command::Variogram {
            common,
            data,
            vario,
        } => {
            let mut f = RunFile {
                bins: vario.bins,
                max_distance: vario.max_distance,
                direction: vario.direction,
                tolerance: vario.tolerance,
                detrend: some_if(vario.detrend),
                covariates: vario.covariates,
                ..RunFile::default()
            };
            data.apply(&mut f);
            let (s, out) = resolve(&common, "variogram", f)?;
            cmd_variogram(s, &out)
        }
        Command::Fit(run) => {
            let (s, out) = run.resolve("fit", RunFile::default())?;
            cmd_fit(s, &out)
        }
        Command::Predict { run, include_noise } => {
            let f = RunFile {
                include_noise: some_if(include_noise),
                ..RunFile::default()
            };
            let (s, out) = run.resolve("predict", f)?;
            cmd_predict(s, &out)
        }
        Command::Grid {
            run,
            grid,
            max_draws,
        } => {
            let f = RunFile {
                grid,
                max_draws,
                ..RunFile::default()
            };
            let (s, out) = run.resolve("grid", f)?;
            cmd_grid(s, &out)
        }
        Command::Validate {
            run,
            surface_coverage,
            max_draws,
        } => {
            let f = RunFile {
                surface_coverage: some_if(surface_coverage),
                max_draws,
                ..RunFile::default()
            };
            let (s, out) = run.resolve("validate", f)?;
            cmd_validate(s, &out)
        }
        Command::Pipeline {
            run,
            no_stage3,
            include_noise,
        } => {
            let f = RunFile {
                no_stage3: some_if(no_stage3),
                include_noise: some_if(include_noise),
                ..RunFile::default()
            };
            let (s, out) = run.resolve("pipeline", f)?;
            cmd_pipeline(s, &out)
        }
        Command::Simulate {
            common,
            spec,
            n_rural,
            n_urban,
        } => {
            let mut sim = match &spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    toml::from_str(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => None,
            };
            if n_rural.is_some() || n_urban.is_some() {
                let s: &mut SimSpec = sim.get_or_insert_with(SimSpec::default);
                s.n_rural = n_rural.unwrap_or(s.n_rural);
                s.n_urban = n_urban.unwrap_or(s.n_urban);
            }
            let f = RunFile {
                simulation: sim,
                ..RunFile::default()
            };
            let (s, out) = resolve(&common, "simulate", f)?;
            cmd_simulate(s, &out)
        }
        Command::Diagnose { common, draws } => {
            let f = RunFile {
                draws,
                ..RunFile::default()
            };
            let (s, out) = resolve(&common, "diagnose", f)?;
            cmd_diagnose(s, &out)
        }
    }
}

impl ModelRun {
    fn resolve(&self, command: &str, mut f: RunFile) -> Result<(RunFile, PathBuf)> {
        self.data.apply(&mut f);
        self.mcmc.apply(&mut f);
        resolve(&self.common, command, f)
    }
}

fn note(msg: &str) {
    eprintln!("notice: {msg}");
}

fn cmd_ingest(s: RunFile, out: &Path) -> Result<()> {
    let ds = load(&s)?;
    let s = RunFile {
        pca_components: Some(s.load_options().pca_components),
        ..s
    };
    let header = s.header(0)?;
    create_out(out)?;
    write_dataset(&ds, &DatasetPaths::in_dir(out), Some(&header.line()))?;
    let mut t = CsvOut::create(
        &out.join("transforms.csv"),
        &header,
        &["covariate", "kind", "fitted_min", "fitted_max_shifted"],
    )?;
    for tr in &ds.transforms {
        let kind = match tr.kind {
            TransformKind::Identity => "identity",
            TransformKind::MinMaxSqrt => "minmax_sqrt",
        };
        t.row([
            tr.name.clone(),
            kind.to_string(),
            tr.fitted_min.to_string(),
            tr.fitted_max_shifted.to_string(),
        ])?;
    }
    t.finish()?;
    if let Some(pca) = &ds.pca {
        let mut cols = vec!["variable".to_string(), "mean".into(), "scale".into()];
        cols.extend((1..=pca.k).map(|k| format!("pc{k}")));
        let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
        let mut w = CsvOut::create(&out.join("pca_loadings.csv"), &header, &cols)?;
        for (i, v) in pca.variable_names.iter().enumerate() {
            let mut row = vec![
                v.clone(),
                pca.means[i].to_string(),
                pca.scales[i].to_string(),
            ];
            row.extend((0..pca.k).map(|k| pca.loadings[(i, k)].to_string()));
            w.row(row)?;
        }
        w.finish()?;
        let mut w = CsvOut::create(
            &out.join("pca_variance.csv"),
            &header,
            &["component", "variance_explained"],
        )?;
        for (k, v) in pca.variance_explained.iter().enumerate() {
            w.row([format!("pc{}", k + 1), v.to_string()])?;
        }
        w.finish()?;
    }
    write_manifest(out, &header, &s)
}

/// Semivariogram of log concentrations at all rural stations, or of
/// least-squares residuals at the rural training stations with `detrend`.
fn cmd_variogram(s: RunFile, out: &Path) -> Result<()> {
    let ds = load(&s)?;
    let (points, values) = if s.detrend == Some(true) {
        let spec = stage_one_spec(&ds, s.covariates.unwrap_or_default())?;
        let x = &spec.data.design;
        let beta = x
            .clone()
            .svd(true, true)
            .solve(&spec.data.y, 1e-12)
            .map_err(|e| Error::Design(e.to_string()))?;
        let resid = &spec.data.y - x * beta;
        (spec.data.points.clone(), resid.iter().copied().collect())
    } else {
        let idx = ds.indices(SiteClass::Rural, None);
        (
            ds.points(&idx),
            ds.log_means(&idx).iter().copied().collect::<Vec<f64>>(),
        )
    };
    finish_variogram(&s, out, &points, &values)
}

fn finish_variogram(s: &RunFile, out: &Path, points: &[(f64, f64)], values: &[f64]) -> Result<()> {
    let bins = match (s.bins, s.max_distance) {
        (None, None) => BinSpec::default_for(points),
        (b, d) => {
            let max = d.unwrap_or_else(|| {
                BinSpec::default_for(points)
                    .edges
                    .last()
                    .copied()
                    .unwrap_or(0.0)
            });
            BinSpec::equal_width(b.unwrap_or(30), max)
        }
    };
    let direction = s.direction.map(|a| Direction {
        angle_deg: a,
        tolerance_deg: s.tolerance.unwrap_or(22.5),
    });
    let emp = empirical_variogram(values, points, &bins, direction)?;
    let fit = fit_exponential_variogram(&emp)?;
    let header = s.header(0)?;
    create_out(out)?;
    output::write_variogram(&out.join("variogram.csv"), &header, &emp)?;
    output::write_variogram_fit(&out.join("variogram_fit.csv"), &header, &fit)?;
    println!(
        "nugget {:.4}, partial sill {:.4}, range {:.1} km, effective range {:.1} km",
        fit.nugget, fit.partial_sill, fit.range_param, fit.effective_range_05
    );
    write_manifest(out, &header, s)
}

fn stage_one(s: &RunFile) -> Result<(Dataset, StageOneFit, RunFile, RunHeader)> {
    let ds = load(s)?;
    let model = s.model_config();
    let resolved = s
        .clone()
        .with_model(&model, s.load_options().pca_components);
    let header = resolved.header(model.mcmc.seed)?;
    let fit = fit_stage_one(&ds, &model)?;
    Ok((ds, fit, resolved, header))
}

fn write_stage_one(out: &Path, header: &RunHeader, fit: &StageOneFit) -> Result<()> {
    let trace = fit.samples.scalar_trace(false);
    output::write_draws(&out.join("draws.csv"), header, &trace)?;
    output::write_summary(&out.join("summary.csv"), header, &trace)?;
    output::write_chain_diagnostics(&out.join("chains.csv"), header, &fit.samples)?;
    for s in trace.summary() {
        if let Some(r) = s.rhat.filter(|r| !(*r < R_HAT_LIMIT)) {
            note(&format!(
                "{} has R-hat {r:.3}; chains may not have converged",
                s.name
            ));
        }
    }
    Ok(())
}

fn cmd_fit(s: RunFile, out: &Path) -> Result<()> {
    let (_, fit, s, header) = stage_one(&s)?;
    create_out(out)?;
    write_stage_one(out, &header, &fit)?;
    write_manifest(out, &header, &s)
}

fn background_predictions(
    fit: &StageOneFit,
    ds: &Dataset,
    include_noise: bool,
) -> Result<(
    crate::hierarchy::PredictionDraws,
    Vec<crate::hierarchy::PredictionResult>,
)> {
    let targets = urban_targets(&fit.spec, ds);
    let surface = predict_background(fit, &targets, &PredictOptions::default())?;
    let summaries = if include_noise {
        let noisy = PredictOptions {
            include_noise: true,
            ..PredictOptions::default()
        };
        predict_background(fit, &targets, &noisy)?.summarize()
    } else {
        surface.summarize()
    };
    Ok((surface, summaries))
}

fn cmd_predict(s: RunFile, out: &Path) -> Result<()> {
    let (ds, fit, s, header) = stage_one(&s)?;
    let (_, results) = background_predictions(&fit, &ds, s.include_noise == Some(true))?;
    create_out(out)?;
    output::write_predictions(&out.join("predictions.csv"), &header, &results)?;
    write_manifest(out, &header, &s)
}

fn read_grid(path: &Path) -> Result<GridCells> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::schema(&name, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let pos = |c: &str| {
        headers
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| Error::schema(&name, format!("missing column '{c}'")))
    };
    let (xi, yi) = (pos("x_km")?, pos("y_km")?);
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != xi && c != yi).collect();
    let mut points = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::schema(&name, e.to_string()))?;
        let parse = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::schema(
                        &name,
                        format!(
                            "row {}: column '{}' is not a finite number",
                            line + 1,
                            headers[c]
                        ),
                    )
                })
        };
        points.push((parse(xi)?, parse(yi)?));
        for &c in &cov_cols {
            values.push(parse(c)?);
        }
    }
    Ok(GridCells {
        global: DMatrix::from_row_slice(points.len(), cov_cols.len(), &values),
        points,
        global_names: cov_cols.iter().map(|&c| headers[c].clone()).collect(),
    })
}

fn cmd_grid(s: RunFile, out: &Path) -> Result<()> {
    let grid_path = s
        .grid
        .clone()
        .ok_or_else(|| Error::Config("--grid is required".into()))?;
    let cells = read_grid(&grid_path)?;
    let (_, fit, s, header) = stage_one(&s)?;
    create_out(out)?;
    let mut cols: Vec<String> = vec!["x_km".into(), "y_km".into()];
    cols.extend(cells.global_names.iter().cloned());
    cols.extend(PREDICTION_COLUMNS[1..].iter().map(|c| c.to_string()));
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut w = CsvOut::create(&out.join("grid_predictions.csv"), &header, &cols)?;
    let mut next = 0;
    let warnings = predict_grid(&fit, &cells, s.max_draws, |block| {
        for r in block {
            let (x, y) = cells.points[next];
            let mut row = vec![x.to_string(), y.to_string()];
            row.extend(cells.global.row(next).iter().map(|v| v.to_string()));
            row.extend(output::prediction_fields(r));
            w.row(row)?;
            next += 1;
        }
        Ok(())
    })?;
    w.finish()?;
    for msg in warnings {
        eprintln!("warning: {msg}");
    }
    write_manifest(out, &header, &s)
}

fn run_validation(
    s: &RunFile,
    out: &Path,
    header: &RunHeader,
    fit: &StageOneFit,
    ds: &Dataset,
) -> Result<()> {
    let opts = ValidationOptions {
        include_noise: s.surface_coverage != Some(true),
        max_draws: s.max_draws,
    };
    let report = validate(fit, ds, &opts)?;
    output::write_validation(&out.join("validation.csv"), header, &report)?;
    let text = output::validation_summary_text(&report);
    output::write_text(&out.join("validation_summary.txt"), header, &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_validate(s: RunFile, out: &Path) -> Result<()> {
    let (ds, fit, s, header) = stage_one(&s)?;
    if ds.rural_validation().is_empty() {
        return Err(Error::Validation(
            "the dataset has no rural validation stations".into(),
        ));
    }
    create_out(out)?;
    run_validation(&s, out, &header, &fit, &ds)?;
    write_manifest(out, &header, &s)
}

fn cmd_pipeline(s: RunFile, out: &Path) -> Result<()> {
    let (ds, fit, s, header) = stage_one(&s)?;
    let (surface, results) = background_predictions(&fit, &ds, s.include_noise == Some(true))?;
    create_out(out)?;
    write_stage_one(out, &header, &fit)?;
    output::write_predictions(&out.join("predictions.csv"), &header, &results)?;
    if ds.rural_validation().is_empty() {
        note("no rural validation stations; validation skipped");
    } else {
        run_validation(&s, out, &header, &fit, &ds)?;
    }

    if s.no_stage3 == Some(true) {
        note("stage 3 disabled by --no-stage3");
    } else if ds.urban().is_empty() {
        note("no urban stations; stage 3 skipped");
    } else {
        let spec = stage_three_spec(&ds)?;
        let urban = fit_stage_three(&spec, &surface, &fit.prior, fit.seed())?;
        let trace = urban.scalar_trace();
        output::write_draws(&out.join("urban_draws.csv"), &header, &trace)?;
        output::write_summary(&out.join("urban_summary.csv"), &header, &trace)?;
        let inc = urban.increment();
        output::write_urban_increment(&out.join("urban_increment.csv"), &header, &inc)?;
        print!("{}", output::urban_increment_text(&inc));
    }
    write_manifest(out, &header, &s)
}

fn cmd_simulate(s: RunFile, out: &Path) -> Result<()> {
    let mut spec = s.simulation.clone().unwrap_or_default();
    if let Some(seed) = s.seed {
        spec.seed = seed;
    }
    let ds = simulate(&spec)?;
    let s = RunFile {
        seed: Some(spec.seed),
        simulation: Some(spec.clone()),
        ..s
    };
    let header = s.header(spec.seed)?;
    create_out(out)?;
    write_dataset(&ds, &DatasetPaths::in_dir(out), Some(&header.line()))?;
    write_manifest(out, &header, &s)
}

fn cmd_diagnose(s: RunFile, out: &Path) -> Result<()> {
    let path = s
        .draws
        .clone()
        .ok_or_else(|| Error::Config("--draws is required".into()))?;
    let trace = output::read_draws(&path)?;
    for p in 0..trace.names.len() {
        trace.rhat(p)?;
    }
    let header = s.header(s.seed.unwrap_or(0))?;
    create_out(out)?;
    output::write_summary(&out.join("diagnostics.csv"), &header, &trace)?;
    let mut worst = (String::new(), 0.0f64);
    for p in 0..trace.names.len() {
        let r = trace.rhat(p)?;
        if r > worst.1 {
            worst = (trace.names[p].clone(), r);
        }
    }
    let mut stdout = std::io::stdout();
    writeln!(stdout, "largest R-hat: {} = {:.4}", worst.0, worst.1)
        .map_err(|e| Error::io("stdout", e))?;
    write_manifest(out, &header, &s)
}
