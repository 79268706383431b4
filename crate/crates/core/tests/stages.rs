use nalgebra::DMatrix;

use geohier::data::{CovariateTable, Dataset, Role, SiteClass, Station, TransformSpec};
use geohier::hierarchy::{
    fit_stage_one, fit_stage_three, predict_background, stage_one_spec, stage_three_spec,
    urban_targets, CovariateSet, ModelConfig, PredictOptions,
};
use geohier::mcmc::McmcConfig;
use geohier::stats::Interval;
use geohier::synthetic::{simulate, SimSpec};
use geohier::Error;

fn config(covariates: CovariateSet, seed: u64) -> ModelConfig {
    ModelConfig {
        covariates,
        mcmc: McmcConfig {
            chains: 2,
            burn_in: 2_000,
            samples: 1_000,
            seed,
            ..McmcConfig::default()
        },
        ..ModelConfig::default()
    }
}

#[test]
fn intercept_only_recovers_the_mean() {
    let ds = simulate(&SimSpec {
        n_rural: 120,
        n_urban: 5,
        beta: vec![2.58],
        n_global: 0,
        seed: 21,
        ..SimSpec::default()
    })
    .unwrap();
    let fit = fit_stage_one(&ds, &config(CovariateSet::InterceptOnly, 3)).unwrap();
    assert_eq!(fit.spec.data.coef_names, ["intercept"]);
    let trace = fit.samples.scalar_trace(false);
    let b0 = Interval::from_draws(&trace.pooled(trace.param_index("beta[intercept]").unwrap()));
    assert!(b0.contains(2.58), "{b0:?}");
    assert!(b0.contains(b0.median));
}

#[test]
fn strong_negative_altitude_effect_has_negative_sign() {
    // rural_1 plays the part of altitude
    let ds = simulate(&SimSpec {
        beta: vec![2.6, -0.3, -3.5],
        seed: 22,
        ..SimSpec::default()
    })
    .unwrap();
    let fit = fit_stage_one(&ds, &config(CovariateSet::GlobalRural, 4)).unwrap();
    let trace = fit.samples.scalar_trace(false);
    let alt = trace.pooled(trace.param_index("beta[rural_1]").unwrap());
    let p_neg = alt.iter().filter(|&&b| b < 0.0).count() as f64 / alt.len() as f64;
    assert!(p_neg > 0.99, "P(beta < 0) = {p_neg}");
}

#[test]
fn road_coefficient_recovered_by_stage_three() {
    let ds = simulate(&SimSpec {
        n_urban: 150,
        seed: 23,
        ..SimSpec::default()
    })
    .unwrap();
    let fit = fit_stage_one(&ds, &config(CovariateSet::GlobalRural, 5)).unwrap();
    let bg = predict_background(&fit, &urban_targets(&fit.spec, &ds), &PredictOptions::default())
        .unwrap();
    let urban = fit_stage_three(&stage_three_spec(&ds).unwrap(), &bg, &fit.prior, 6).unwrap();
    let trace = urban.scalar_trace();
    let road = Interval::from_draws(&trace.pooled(trace.param_index("gamma[urban_1]").unwrap()));
    assert!(road.contains(0.0623), "{road:?}");
    assert!(((0.0623f64).exp() - 1.064).abs() < 5e-4);
}

fn station(id: &str, x: f64, class: SiteClass) -> Station {
    Station {
        id: id.into(),
        x_km: x,
        y_km: 0.0,
        site_class: class,
        role: Role::Training,
        annual_mean: 10.0 + x / 100.0,
    }
}

#[test]
fn duplicated_column_is_a_design_error() {
    let n = 12;
    let stations: Vec<Station> = (0..n)
        .map(|i| station(&format!("R{i}"), 50.0 * i as f64, SiteClass::Rural))
        .collect();
    let ids: Vec<String> = stations.iter().map(|s| s.id.clone()).collect();
    let altitude: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64 / 4.0).collect();
    let values = DMatrix::from_fn(n, 2, |i, _| altitude[i]);
    let names = vec!["altitude".to_string(), "altitude_copy".to_string()];
    let table = CovariateTable::new(ids, names.clone(), vec![], vec![], values).unwrap();
    let transforms = names.iter().map(TransformSpec::identity).collect();
    let ds = Dataset::new(stations, table, transforms, None).unwrap();
    match stage_one_spec(&ds, CovariateSet::Global) {
        Err(Error::Design(msg)) => assert!(msg.contains("altitude_copy"), "{msg}"),
        other => panic!("expected a design error, got {other:?}"),
    }
}
