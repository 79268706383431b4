use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    MinMaxSqrt,
}

/// A fitted per-covariate transform. `MinMaxSqrt` maps `x` to
/// `sqrt((x - min) / (max - min))`, clamped into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub name: String,
    pub kind: TransformKind,
    pub fitted_min: f64,
    pub fitted_max_shifted: f64,
}

impl TransformSpec {
    pub fn identity(name: impl Into<String>) -> Self {
        TransformSpec {
            name: name.into(),
            kind: TransformKind::Identity,
            fitted_min: 0.0,
            fitted_max_shifted: 1.0,
        }
    }

    pub fn apply(&self, value: f64) -> f64 {
        apply_transform(self, value)
    }
}

/// Fit the shifted-square-root transform to a column of values.
pub fn fit_minmax_sqrt(name: impl Into<String>, values: &[f64]) -> Result<TransformSpec> {
    let name = name.into();
    if values.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no values to fit transform for {name}"
        )));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Value {
            station: "<column>".into(),
            message: format!("non-finite value {bad} in covariate {name}"),
        });
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = max - min;
    if !(shifted > 0.0) {
        return Err(Error::DegenerateTransform { name, value: min });
    }
    Ok(TransformSpec {
        name,
        kind: TransformKind::MinMaxSqrt,
        fitted_min: min,
        fitted_max_shifted: shifted,
    })
}

pub fn apply_transform(spec: &TransformSpec, value: f64) -> f64 {
    match spec.kind {
        TransformKind::Identity => value,
        TransformKind::MinMaxSqrt => {
            let scaled = (value - spec.fitted_min) / spec.fitted_max_shifted;
            scaled.clamp(0.0, 1.0).sqrt()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fits_min_and_range() {
        let spec = fit_minmax_sqrt("dist_sea", &[0.0, 25.0, 100.0]).unwrap();
        assert_eq!(spec.fitted_min, 0.0);
        assert_eq!(spec.fitted_max_shifted, 100.0);
        assert_eq!(spec.apply(25.0), 0.5);
        assert_eq!(spec.apply(0.0), 0.0);
        assert_eq!(spec.apply(100.0), 1.0);
        assert!((spec.apply(50.0) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn clamps_outside_fitted_range() {
        let spec = fit_minmax_sqrt("x", &[10.0, 20.0]).unwrap();
        assert_eq!(spec.apply(-5.0), 0.0);
        assert_eq!(spec.apply(1e6), 1.0);
    }

    #[test]
    fn all_equal_is_degenerate() {
        let err = fit_minmax_sqrt("alt", &[3.0, 3.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateTransform { .. }));
    }

    #[test]
    fn identity_passes_through() {
        assert_eq!(TransformSpec::identity("x").apply(-7.25), -7.25);
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(lo in -1e3..1e3f64, width in 1e-3..1e3f64, a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let spec = fit_minmax_sqrt("x", &[lo, lo + width]).unwrap();
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            let ta = spec.apply(lo + a * width);
            let tb = spec.apply(lo + b * width);
            prop_assert!(ta <= tb);
            prop_assert!((0.0..=1.0).contains(&ta) && (0.0..=1.0).contains(&tb));
        }
    }
}
