//! Delimited-text artifacts. Every file starts with one `#` comment line
//! naming the tool version, seed and a hash of the model configuration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hierarchy::{PredictionResult, UrbanIncrement};
use crate::mcmc::{PosteriorSamples, ScalarTrace};
use crate::validation::ValidationReport;
use crate::variogram::{EmpiricalVariogram, ExponentialVariogramFit};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunHeader {
    pub seed: u64,
    pub config_hash: String,
}

impl RunHeader {
    pub fn new(seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(RunHeader {
            seed,
            config_hash: config_hash(config)?,
        })
    }

    pub fn line(&self) -> String {
        format!(
            "# tool=geohier version={} seed={} config_hash={}",
            env!("CARGO_PKG_VERSION"),
            self.seed,
            self.config_hash
        )
    }
}

/// First 16 hex digits of the SHA-256 of the TOML rendering.
pub fn config_hash(config: &impl Serialize) -> Result<String> {
    let text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// CSV file with the run header line.
pub struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    pub fn create(path: &Path, header: &RunHeader, columns: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = BufWriter::new(file);
        writeln!(buf, "{}", header.line()).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(buf);
        writer
            .write_record(columns)
            .map_err(|e| csv_error(path, e))?;
        Ok(CsvOut {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer
            .write_record(fields)
            .map_err(|e| csv_error(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::schema(path.display().to_string(), format!("{other:?}")),
    }
}

fn num(v: f64) -> String {
    v.to_string()
}

/// Long format: `chain,iter,param_name,value`.
pub fn write_draws(path: &Path, header: &RunHeader, trace: &ScalarTrace) -> Result<()> {
    let mut out = CsvOut::create(path, header, &["chain", "iter", "param_name", "value"])?;
    for (c, chain) in trace.values.iter().enumerate() {
        let n = chain.first().map_or(0, Vec::len);
        for k in 0..n {
            for (p, name) in trace.names.iter().enumerate() {
                out.row([c.to_string(), k.to_string(), name.clone(), num(chain[p][k])])?;
            }
        }
    }
    out.finish()
}

/// Inverse of [`write_draws`].
pub fn read_draws(path: &Path) -> Result<ScalarTrace> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = |want: &str| {
        headers
            .iter()
            .position(|h| h == want)
            .ok_or_else(|| Error::schema(&name, format!("missing column '{want}'")))
    };
    let (ci, ki, pi, vi) = (
        col("chain")?,
        col("iter")?,
        col("param_name")?,
        col("value")?,
    );
    let mut trace = ScalarTrace {
        names: Vec::new(),
        values: Vec::new(),
    };
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = |what: &str| Error::schema(&name, format!("row {}: bad {what}", line + 1));
        let chain: usize = rec[ci].parse().map_err(|_| bad("chain"))?;
        let iter: usize = rec[ki].parse().map_err(|_| bad("iter"))?;
        let value: f64 = rec[vi].parse().map_err(|_| bad("value"))?;
        let param = match trace.param_index(&rec[pi]) {
            Some(p) => p,
            None => {
                trace.names.push(rec[pi].to_string());
                trace.values.iter_mut().for_each(|c| c.push(Vec::new()));
                trace.names.len() - 1
            }
        };
        while trace.values.len() <= chain {
            trace.values.push(vec![Vec::new(); trace.names.len()]);
        }
        let slot = &mut trace.values[chain][param];
        if slot.len() != iter {
            return Err(bad("iteration order"));
        }
        slot.push(value);
    }
    Ok(trace)
}

/// `param,median,q2.5,q97.5,rhat`; `rhat` is empty when unavailable.
pub fn write_summary(path: &Path, header: &RunHeader, trace: &ScalarTrace) -> Result<()> {
    let mut out = CsvOut::create(path, header, &["param", "median", "q2.5", "q97.5", "rhat"])?;
    for s in trace.summary() {
        out.row([
            s.name,
            num(s.interval.median),
            num(s.interval.lo),
            num(s.interval.hi),
            s.rhat.map(num).unwrap_or_default(),
        ])?;
    }
    out.finish()
}

pub fn write_chain_diagnostics(
    path: &Path,
    header: &RunHeader,
    samples: &PosteriorSamples,
) -> Result<()> {
    let mut out = CsvOut::create(
        path,
        header,
        &[
            "chain",
            "accept_rate_phi",
            "proposal_sd_phi",
            "adaptation_updates",
            "retained_draws",
        ],
    )?;
    for c in 0..samples.n_chains() {
        out.row([
            c.to_string(),
            num(samples.accept_rate_phi[c]),
            num(samples.proposal_sd_phi[c]),
            samples.adaptation_updates[c].to_string(),
            samples.chains[c].len().to_string(),
        ])?;
    }
    out.finish()
}

pub const PREDICTION_COLUMNS: [&str; 8] = [
    "id",
    "log_mean",
    "log_var",
    "log_lo95",
    "log_hi95",
    "nat_median",
    "nat_lo95",
    "nat_hi95",
];

/// Prediction columns after the id.
pub fn prediction_fields(r: &PredictionResult) -> [String; 7] {
    [
        num(r.log_mean),
        num(r.log_variance),
        num(r.ci95_log.0),
        num(r.ci95_log.1),
        num(r.natural_median),
        num(r.ci95_natural.0),
        num(r.ci95_natural.1),
    ]
}

pub fn write_predictions(
    path: &Path,
    header: &RunHeader,
    results: &[PredictionResult],
) -> Result<()> {
    let mut out = CsvOut::create(path, header, &PREDICTION_COLUMNS)?;
    for r in results {
        let mut row = vec![r.id.clone()];
        row.extend(prediction_fields(r));
        out.row(row)?;
    }
    out.finish()
}

pub fn write_variogram(path: &Path, header: &RunHeader, emp: &EmpiricalVariogram) -> Result<()> {
    let mut out = CsvOut::create(path, header, &["bin_center_km", "gamma_hat", "pair_count"])?;
    for k in 0..emp.bin_centers.len() {
        out.row([
            num(emp.bin_centers[k]),
            num(emp.gamma_hat[k]),
            emp.pair_counts[k].to_string(),
        ])?;
    }
    out.finish()
}

pub fn write_variogram_fit(
    path: &Path,
    header: &RunHeader,
    fit: &ExponentialVariogramFit,
) -> Result<()> {
    let mut out = CsvOut::create(
        path,
        header,
        &[
            "nugget",
            "partial_sill",
            "total_sill",
            "range_km",
            "effective_range_05_km",
            "weighted_sse",
            "degenerate",
        ],
    )?;
    out.row([
        num(fit.nugget),
        num(fit.partial_sill),
        num(fit.total_sill()),
        num(fit.range_param),
        num(fit.effective_range_05),
        num(fit.weighted_sse),
        fit.degenerate.to_string(),
    ])?;
    out.finish()
}

pub fn write_validation(path: &Path, header: &RunHeader, report: &ValidationReport) -> Result<()> {
    let mut out = CsvOut::create(
        path,
        header,
        &[
            "id",
            "observed",
            "pred_median",
            "pred_lo95",
            "pred_hi95",
            "covered",
        ],
    )?;
    for s in &report.stations {
        out.row([
            s.id.clone(),
            num(s.observed),
            num(s.predicted_median),
            num(s.ci95.0),
            num(s.ci95.1),
            s.covered.to_string(),
        ])?;
    }
    out.finish()
}

pub fn validation_summary_text(report: &ValidationReport) -> String {
    format!(
        "validation stations: {}\n\
         RMSE (natural scale): median {:.4} (95% CI {:.4} to {:.4})\n\
         R2 (%): median {:.2} (95% CI {:.2} to {:.2})\n\
         95% interval coverage: {}/{} ({:.1}%)\n",
        report.total,
        report.rmse.median,
        report.rmse.lo,
        report.rmse.hi,
        report.r2.median,
        report.r2.lo,
        report.r2.hi,
        report.covered,
        report.total,
        100.0 * report.coverage_fraction()
    )
}

pub fn write_text(path: &Path, header: &RunHeader, body: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "{}\n{body}", header.line()).map_err(|e| Error::io(path, e))
}

pub fn write_urban_increment(path: &Path, header: &RunHeader, inc: &UrbanIncrement) -> Result<()> {
    let mut out = CsvOut::create(path, header, &["scale", "median", "q2.5", "q97.5"])?;
    for (scale, iv) in [("log", inc.log), ("natural", inc.natural)] {
        out.row([scale.to_string(), num(iv.median), num(iv.lo), num(iv.hi)])?;
    }
    out.finish()
}

pub fn urban_increment_text(inc: &UrbanIncrement) -> String {
    format!(
        "urban increment (log scale): {:.4} (95% CI {:.4} to {:.4})\n\
         urban increment (natural scale, multiplicative): {:.2} (95% CI {:.2} to {:.2})\n",
        inc.log.median, inc.log.lo, inc.log.hi, inc.natural.median, inc.natural.lo, inc.natural.hi
    )
}
