//! Posterior predictive checks at held-out rural stations.
//!
//! RMSE and R² are evaluated per draw on the concentration scale from
//! surface draws, then summarised across draws. Coverage uses predictive
//! intervals, which include observation noise unless disabled.

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hierarchy::{
    predict_background, validation_targets, PredictOptions, PredictionDraws, StageOneFit,
};
use crate::mcmc::streams;
use crate::stats::Interval;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationValidation {
    pub id: String,
    pub observed: f64,
    pub predicted_median: f64,
    pub ci95: (f64, f64),
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// Concentration units.
    pub rmse: Interval,
    /// Percent; negative when predictions do worse than the observed mean.
    pub r2: Interval,
    pub covered: usize,
    pub total: usize,
    pub stations: Vec<StationValidation>,
}

impl ValidationReport {
    pub fn coverage_fraction(&self) -> f64 {
        self.covered as f64 / self.total as f64
    }
}

/// RMSE and `100 (1 - SSE / SST)` for one draw of natural-scale predictions.
pub fn rmse_r2(observed: &[f64], predicted: impl Iterator<Item = f64>) -> (f64, f64) {
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let sst: f64 = observed.iter().map(|o| (o - mean) * (o - mean)).sum();
    let sse: f64 = observed
        .iter()
        .zip(predicted)
        .map(|(o, p)| (o - p) * (o - p))
        .sum();
    let r2 = if sst > 0.0 {
        100.0 * (1.0 - sse / sst)
    } else {
        f64::NAN
    };
    ((sse / n).sqrt(), r2)
}

/// Build the report from log-scale surface draws (for RMSE and R²) and
/// predictive draws (for intervals). `observed` is on the natural scale.
pub fn validation_report(
    observed: &[f64],
    surface: &PredictionDraws,
    predictive: &PredictionDraws,
) -> Result<ValidationReport> {
    if observed.is_empty() {
        return Err(Error::Validation("no validation stations".into()));
    }
    if surface.ids.len() != observed.len() || predictive.ids != surface.ids {
        return Err(Error::Validation(
            "prediction draws do not match the validation stations".into(),
        ));
    }
    if surface.n_draws() == 0 {
        return Err(Error::Validation("no posterior draws".into()));
    }
    let (rmse, r2): (Vec<f64>, Vec<f64>) = surface
        .iter()
        .map(|(_, v)| rmse_r2(observed, v.iter().map(|x| x.exp())))
        .unzip();
    let stations: Vec<StationValidation> = predictive
        .ids
        .iter()
        .enumerate()
        .map(|(j, id)| {
            let log_iv = Interval::from_draws(&predictive.target_draws(j));
            let obs = observed[j];
            StationValidation {
                id: id.clone(),
                observed: obs,
                predicted_median: log_iv.median.exp(),
                ci95: (log_iv.lo.exp(), log_iv.hi.exp()),
                covered: log_iv.contains(obs.ln()),
            }
        })
        .collect();
    let r2 = if r2.iter().any(|v| v.is_nan()) {
        Interval {
            median: f64::NAN,
            lo: f64::NAN,
            hi: f64::NAN,
        }
    } else {
        Interval::from_draws(&r2)
    };
    Ok(ValidationReport {
        rmse: Interval::from_draws(&rmse),
        r2,
        covered: stations.iter().filter(|s| s.covered).count(),
        total: stations.len(),
        stations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOptions {
    /// Include observation noise in the coverage intervals.
    pub include_noise: bool,
    pub max_draws: Option<usize>,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            include_noise: true,
            max_draws: None,
        }
    }
}

/// Predict at the dataset's rural validation stations and score the
/// predictions against their observed means.
pub fn validate(
    fit: &StageOneFit,
    ds: &Dataset,
    opts: &ValidationOptions,
) -> Result<ValidationReport> {
    let targets = validation_targets(&fit.spec, ds);
    if targets.is_empty() {
        return Err(Error::Validation(
            "the dataset has no rural validation stations".into(),
        ));
    }
    let observed: Vec<f64> = ds
        .rural_validation()
        .iter()
        .map(|&i| ds.stations[i].annual_mean)
        .collect();
    let base = PredictOptions {
        include_noise: false,
        joint: true,
        stream: streams::VALIDATE,
        max_draws: opts.max_draws,
    };
    let surface = predict_background(fit, &targets, &base)?;
    let predictive = if opts.include_noise {
        predict_background(
            fit,
            &targets,
            &PredictOptions {
                include_noise: true,
                ..base
            },
        )?
    } else {
        surface.clone()
    };
    validation_report(&observed, &surface, &predictive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn draws(rows: Vec<Vec<f64>>) -> PredictionDraws {
        let n = rows[0].len();
        PredictionDraws {
            ids: (0..n).map(|i| format!("V{i}")).collect(),
            chains: vec![rows.into_iter().map(DVector::from_vec).collect()],
        }
    }

    #[test]
    fn perfect_predictions() {
        let obs = [12.0, 20.5, 7.25, 31.0];
        let logs: Vec<f64> = obs.iter().map(|o: &f64| o.ln()).collect();
        let d = draws(vec![logs; 50]);
        let r = validation_report(&obs, &d, &d).unwrap();
        assert!(r.rmse.median.abs() < 1e-12 && r.rmse.hi.abs() < 1e-12);
        assert!((r.r2.median - 100.0).abs() < 1e-10 && (r.r2.lo - 100.0).abs() < 1e-10);
        assert_eq!((r.covered, r.total), (4, 4));
    }

    #[test]
    fn single_station_rmse_is_absolute_error() {
        let d = draws(vec![vec![10f64.ln()]; 20]);
        let r = validation_report(&[13.0], &d, &d).unwrap();
        assert!((r.rmse.median - 3.0).abs() < 1e-12);
        assert!((r.rmse.lo - 3.0).abs() < 1e-12);
        assert!(r.r2.median.is_nan());
        assert_eq!(r.covered, 0);
    }

    #[test]
    fn metrics_are_per_draw_not_from_the_mean_prediction() {
        // draws straddle the observation; their mean is exact but each draw is off by 1
        let obs = [10.0, 20.0];
        let d = draws(vec![
            vec![9f64.ln(), 21f64.ln()],
            vec![11f64.ln(), 19f64.ln()],
        ]);
        let r = validation_report(&obs, &d, &d).unwrap();
        assert!((r.rmse.lo - 1.0).abs() < 1e-12 && (r.rmse.hi - 1.0).abs() < 1e-12);
        assert!((r.r2.median - 100.0 * (1.0 - 2.0 / 50.0)).abs() < 1e-10);
    }

    #[test]
    fn r2_can_be_negative() {
        let obs = [10.0, 20.0];
        let d = draws(vec![vec![30f64.ln(), 1f64.ln()]; 3]);
        let r = validation_report(&obs, &d, &d).unwrap();
        assert!(r.r2.median < 0.0);
        assert!(r.r2.hi <= 100.0);
    }

    #[test]
    fn widening_intervals_never_uncovers() {
        let obs = [10.0, 14.0, 30.0];
        let narrow: Vec<Vec<f64>> = (0..200)
            .map(|k| {
                let e = (k as f64 / 199.0 - 0.5) * 0.4;
                vec![(11.0f64).ln() + e, (14.0f64).ln() + e, (20.0f64).ln() + e]
            })
            .collect();
        let wide: Vec<Vec<f64>> = narrow
            .iter()
            .map(|r| {
                let c = [11.0f64.ln(), 14.0f64.ln(), 20.0f64.ln()];
                r.iter().zip(c).map(|(x, m)| m + 3.0 * (x - m)).collect()
            })
            .collect();
        let a = validation_report(&obs, &draws(narrow.clone()), &draws(narrow)).unwrap();
        let b = validation_report(&obs, &draws(wide.clone()), &draws(wide)).unwrap();
        for (s, t) in a.stations.iter().zip(&b.stations) {
            assert!(!s.covered || t.covered);
        }
        assert!(b.covered >= a.covered);
    }

    #[test]
    fn empty_set_is_an_error() {
        let d = PredictionDraws {
            ids: vec![],
            chains: vec![vec![]],
        };
        assert!(matches!(
            validation_report(&[], &d, &d),
            Err(Error::Validation(_))
        ));
    }
}
