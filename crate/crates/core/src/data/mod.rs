//! Monitoring stations, covariates and their transforms.

mod io;
mod pca;
mod transform;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, write_dataset, DatasetPaths, LoadOptions};
pub use pca::{fit_pca, project_pca, PcaModel};
pub use transform::{apply_transform, fit_minmax_sqrt, TransformKind, TransformSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteClass {
    Rural,
    Urban,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Training,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateGroup {
    Global,
    Rural,
    Urban,
}

macro_rules! text_enum {
    ($ty:ty { $($text:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($variant),)+
                    other => Err(format!("unrecognised value '{other}'")),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $(v if *v == $variant => $text,)+ _ => unreachable!() };
                f.write_str(s)
            }
        }
    };
}

text_enum!(SiteClass { "rural" => SiteClass::Rural, "urban" => SiteClass::Urban });
text_enum!(Role { "training" => Role::Training, "validation" => Role::Validation });
text_enum!(CovariateGroup {
    "global" => CovariateGroup::Global,
    "rural" => CovariateGroup::Rural,
    "urban" => CovariateGroup::Urban,
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub x_km: f64,
    pub y_km: f64,
    pub site_class: SiteClass,
    pub role: Role,
    /// Annual mean concentration on the natural scale.
    pub annual_mean: f64,
}

impl Station {
    pub fn log_mean(&self) -> f64 {
        self.annual_mean.ln()
    }

    pub fn point(&self) -> (f64, f64) {
        (self.x_km, self.y_km)
    }
}

/// Design-ready covariate values. Columns are ordered global, then rural,
/// then urban; rows follow `station_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub station_ids: Vec<String>,
    pub global_names: Vec<String>,
    pub rural_names: Vec<String>,
    pub urban_names: Vec<String>,
    pub values: DMatrix<f64>,
}

impl CovariateTable {
    pub fn new(
        station_ids: Vec<String>,
        global_names: Vec<String>,
        rural_names: Vec<String>,
        urban_names: Vec<String>,
        values: DMatrix<f64>,
    ) -> Result<Self> {
        let ncol = global_names.len() + rural_names.len() + urban_names.len();
        if values.nrows() != station_ids.len() {
            return Err(Error::Integrity(format!(
                "covariate table has {} rows for {} stations",
                values.nrows(),
                station_ids.len()
            )));
        }
        if values.ncols() != ncol {
            return Err(Error::Integrity(format!(
                "covariate table has {} columns for {ncol} names",
                values.ncols()
            )));
        }
        let mut seen = HashMap::new();
        for name in global_names.iter().chain(&rural_names).chain(&urban_names) {
            if seen.insert(name.as_str(), ()).is_some() {
                return Err(Error::Integrity(format!(
                    "covariate {name} assigned to more than one group"
                )));
            }
        }
        if let Some((i, j)) = values
            .iter()
            .position(|v| !v.is_finite())
            .map(|k| (k % values.nrows(), k / values.nrows()))
        {
            return Err(Error::Value {
                station: station_ids[i].clone(),
                message: format!("missing or non-finite covariate in column {j}"),
            });
        }
        Ok(CovariateTable {
            station_ids,
            global_names,
            rural_names,
            urban_names,
            values,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.global_names
            .iter()
            .chain(&self.rural_names)
            .chain(&self.urban_names)
    }

    pub fn group_range(&self, group: CovariateGroup) -> std::ops::Range<usize> {
        let g = self.global_names.len();
        let r = self.rural_names.len();
        let u = self.urban_names.len();
        match group {
            CovariateGroup::Global => 0..g,
            CovariateGroup::Rural => g..g + r,
            CovariateGroup::Urban => g + r..g + r + u,
        }
    }

    pub fn group_names(&self, group: CovariateGroup) -> &[String] {
        match group {
            CovariateGroup::Global => &self.global_names,
            CovariateGroup::Rural => &self.rural_names,
            CovariateGroup::Urban => &self.urban_names,
        }
    }

    /// Values of one group for one row.
    pub fn group_row(&self, row: usize, group: CovariateGroup) -> DVector<f64> {
        let range = self.group_range(group);
        DVector::from_iterator(range.len(), range.map(|c| self.values[(row, c)]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Sorted by id.
    pub stations: Vec<Station>,
    pub covariates: CovariateTable,
    pub transforms: Vec<TransformSpec>,
    pub pca: Option<PcaModel>,
}

impl Dataset {
    /// Validate cross-table invariants and sort by station id.
    pub fn new(
        mut stations: Vec<Station>,
        covariates: CovariateTable,
        transforms: Vec<TransformSpec>,
        pca: Option<PcaModel>,
    ) -> Result<Self> {
        validate_stations(&stations)?;
        if covariates.station_ids.len() != stations.len() {
            return Err(Error::Integrity(format!(
                "{} covariate rows for {} stations",
                covariates.station_ids.len(),
                stations.len()
            )));
        }
        let index: HashMap<&str, usize> = covariates
            .station_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        if index.len() != covariates.station_ids.len() {
            return Err(Error::Integrity("duplicate id in covariate rows".into()));
        }
        stations.sort_by(|a, b| a.id.cmp(&b.id));
        let mut order = Vec::with_capacity(stations.len());
        for s in &stations {
            match index.get(s.id.as_str()) {
                Some(&row) => order.push(row),
                None => {
                    return Err(Error::Integrity(format!(
                        "station {} has no covariate row",
                        s.id
                    )))
                }
            }
        }
        let values = covariates.values.select_rows(order.iter());
        let covariates = CovariateTable {
            station_ids: stations.iter().map(|s| s.id.clone()).collect(),
            values,
            ..covariates
        };
        Ok(Dataset {
            stations,
            covariates,
            transforms,
            pca,
        })
    }

    pub fn indices(&self, class: SiteClass, role: Option<Role>) -> Vec<usize> {
        self.stations
            .iter()
            .enumerate()
            .filter(|(_, s)| s.site_class == class && role.is_none_or(|r| s.role == r))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn rural_training(&self) -> Vec<usize> {
        self.indices(SiteClass::Rural, Some(Role::Training))
    }

    pub fn rural_validation(&self) -> Vec<usize> {
        self.indices(SiteClass::Rural, Some(Role::Validation))
    }

    pub fn urban(&self) -> Vec<usize> {
        self.indices(SiteClass::Urban, None)
    }

    pub fn points(&self, idx: &[usize]) -> Vec<(f64, f64)> {
        idx.iter().map(|&i| self.stations[i].point()).collect()
    }

    pub fn log_means(&self, idx: &[usize]) -> DVector<f64> {
        DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.stations[i].log_mean()))
    }
}

fn validate_stations(stations: &[Station]) -> Result<()> {
    let mut ids = HashMap::new();
    for s in stations {
        if !(s.annual_mean > 0.0) || !s.annual_mean.is_finite() {
            return Err(Error::Value {
                station: s.id.clone(),
                message: format!("annual_mean must be positive, got {}", s.annual_mean),
            });
        }
        if !s.x_km.is_finite() || !s.y_km.is_finite() {
            return Err(Error::Value {
                station: s.id.clone(),
                message: "coordinates must be finite".into(),
            });
        }
        if ids.insert(s.id.as_str(), ()).is_some() {
            return Err(Error::Integrity(format!("duplicate station id {}", s.id)));
        }
    }
    // coincident sites make the spatial correlation matrix singular
    let mut by_point: Vec<&Station> = stations.iter().collect();
    by_point.sort_by(|a, b| a.x_km.total_cmp(&b.x_km).then(a.y_km.total_cmp(&b.y_km)));
    for w in by_point.windows(2) {
        if w[0].x_km == w[1].x_km && w[0].y_km == w[1].y_km {
            return Err(Error::Integrity(format!(
                "stations {} and {} share coordinates",
                w[0].id, w[1].id
            )));
        }
    }
    Ok(())
}
