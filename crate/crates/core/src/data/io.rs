use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::{
    fit_minmax_sqrt, fit_pca, CovariateGroup, CovariateTable, Dataset, Role, SiteClass, Station,
    TransformSpec,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub stations: PathBuf,
    pub covariates: PathBuf,
    pub grouping: PathBuf,
}

impl DatasetPaths {
    /// `stations.csv`, `covariates.csv` and `grouping.csv` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            stations: dir.join("stations.csv"),
            covariates: dir.join("covariates.csv"),
            grouping: dir.join("grouping.csv"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Number of climate principal components retained.
    pub pca_components: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { pca_components: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GroupingTransform {
    Identity,
    MinMaxSqrt,
    PcaClimate,
}

struct Table {
    file: String,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(file);
        let headers = reader
            .headers()
            .map_err(|e| Error::schema(&name, e.to_string()))?
            .iter()
            .map(|h| h.trim_start_matches('\u{feff}').to_string())
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::schema(&name, e.to_string()))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Table {
            file: name,
            headers,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::schema(&self.file, format!("missing column '{name}'")))
    }
}

fn parse_real(table: &Table, row: &[String], col: usize, station: &str) -> Result<f64> {
    let text = &row[col];
    text.parse::<f64>().map_err(|_| Error::Value {
        station: station.to_string(),
        message: format!(
            "column '{}' in {}: cannot parse '{text}' as a number",
            table.headers[col], table.file
        ),
    })
}

fn read_stations(path: &Path) -> Result<Vec<Station>> {
    let t = Table::read(path)?;
    let cols: Vec<usize> = ["id", "x_km", "y_km", "site_class", "role", "annual_mean"]
        .iter()
        .map(|c| t.column(c))
        .collect::<Result<_>>()?;
    t.rows
        .iter()
        .map(|row| {
            let id = row[cols[0]].clone();
            let enum_err = |col: usize, msg: String| Error::Value {
                station: id.clone(),
                message: format!("{}: {msg}", t.headers[col]),
            };
            Ok(Station {
                x_km: parse_real(&t, row, cols[1], &id)?,
                y_km: parse_real(&t, row, cols[2], &id)?,
                site_class: row[cols[3]]
                    .parse::<SiteClass>()
                    .map_err(|m| enum_err(cols[3], m))?,
                role: row[cols[4]]
                    .parse::<Role>()
                    .map_err(|m| enum_err(cols[4], m))?,
                annual_mean: parse_real(&t, row, cols[5], &id)?,
                id,
            })
        })
        .collect()
}

/// Load stations, covariates and grouping, fit covariate transforms on all
/// loaded stations, and project climate variables onto principal components.
pub fn load_dataset(paths: &DatasetPaths, options: &LoadOptions) -> Result<Dataset> {
    let stations = read_stations(&paths.stations)?;
    let cov = Table::read(&paths.covariates)?;
    let grouping = Table::read(&paths.grouping)?;

    let id_col = cov.column("id")?;
    if cov.rows.len() != stations.len() {
        return Err(Error::Integrity(format!(
            "{} has {} rows but there are {} stations",
            cov.file,
            cov.rows.len(),
            stations.len()
        )));
    }

    let g_name = grouping.column("covariate")?;
    let g_group = grouping.column("group")?;
    let g_transform = grouping.column("transform")?;
    let mut entries: Vec<(String, CovariateGroup, GroupingTransform)> = Vec::new();
    for row in &grouping.rows {
        let name = row[g_name].clone();
        let group = row[g_group]
            .parse::<CovariateGroup>()
            .map_err(|m| Error::schema(&grouping.file, format!("covariate {name}: group {m}")))?;
        let transform = match row[g_transform].to_ascii_lowercase().as_str() {
            "identity" => GroupingTransform::Identity,
            "minmax_sqrt" => GroupingTransform::MinMaxSqrt,
            "pca_climate" => GroupingTransform::PcaClimate,
            other => {
                return Err(Error::schema(
                    &grouping.file,
                    format!("covariate {name}: unknown transform '{other}'"),
                ))
            }
        };
        if entries.iter().any(|(n, _, _)| *n == name) {
            return Err(Error::Integrity(format!(
                "covariate {name} listed twice in {}",
                grouping.file
            )));
        }
        entries.push((name, group, transform));
    }

    let ids: Vec<String> = cov.rows.iter().map(|r| r[id_col].clone()).collect();
    let raw_column = |name: &str| -> Result<Vec<f64>> {
        let c = cov.column(name)?;
        cov.rows
            .iter()
            .zip(&ids)
            .map(|(row, id)| {
                if row[c].is_empty() {
                    return Err(Error::Value {
                        station: id.clone(),
                        message: format!("missing value for covariate '{name}'"),
                    });
                }
                parse_real(&cov, row, c, id)
            })
            .collect()
    };

    let mut columns: HashMap<CovariateGroup, Vec<(String, Vec<f64>)>> = HashMap::new();
    let mut transforms = Vec::new();
    let mut climate: Vec<(String, Vec<f64>)> = Vec::new();
    let mut climate_group = None;
    for (name, group, transform) in &entries {
        let raw = raw_column(name)?;
        match transform {
            GroupingTransform::Identity => {
                transforms.push(TransformSpec::identity(name));
                columns.entry(*group).or_default().push((name.clone(), raw));
            }
            GroupingTransform::MinMaxSqrt => {
                let spec = fit_minmax_sqrt(name, &raw)?;
                let values = raw.iter().map(|&v| spec.apply(v)).collect();
                transforms.push(spec);
                columns
                    .entry(*group)
                    .or_default()
                    .push((name.clone(), values));
            }
            GroupingTransform::PcaClimate => {
                if climate_group.is_some_and(|g| g != *group) {
                    return Err(Error::schema(
                        &grouping.file,
                        "pca_climate covariates must all belong to one group",
                    ));
                }
                climate_group = Some(*group);
                climate.push((name.clone(), raw));
            }
        }
    }

    let pca = match climate_group {
        None => None,
        Some(group) => {
            let names: Vec<String> = climate.iter().map(|(n, _)| n.clone()).collect();
            let data = DMatrix::from_fn(ids.len(), climate.len(), |i, j| climate[j].1[i]);
            let model = fit_pca(&names, &data, options.pca_components)?;
            let scores: Vec<_> = (0..ids.len())
                .map(|i| model.project(&data.row(i).iter().copied().collect::<Vec<_>>()))
                .collect();
            for c in 0..model.k {
                columns.entry(group).or_default().push((
                    format!("climate_pc{}", c + 1),
                    scores.iter().map(|s| s[c]).collect(),
                ));
            }
            Some(model)
        }
    };

    let mut names_by_group = Vec::new();
    let mut all_columns = Vec::new();
    for group in [
        CovariateGroup::Global,
        CovariateGroup::Rural,
        CovariateGroup::Urban,
    ] {
        let cols = columns.remove(&group).unwrap_or_default();
        names_by_group.push(cols.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
        all_columns.extend(cols.into_iter().map(|(_, v)| v));
    }
    let values = DMatrix::from_fn(ids.len(), all_columns.len(), |i, j| all_columns[j][i]);
    let mut names_by_group = names_by_group.into_iter();
    let table = CovariateTable::new(
        ids,
        names_by_group.next().unwrap_or_default(),
        names_by_group.next().unwrap_or_default(),
        names_by_group.next().unwrap_or_default(),
        values,
    )?;
    Dataset::new(stations, table, transforms, pca)
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

/// Write a dataset in the ingestion format, with every covariate marked as
/// an identity transform so that re-loading reproduces the same values.
pub fn write_dataset(ds: &Dataset, paths: &DatasetPaths, header: Option<&str>) -> Result<()> {
    let mut f = create(&paths.stations)?;
    let p = paths.stations.as_path();
    if let Some(h) = header {
        writeln!(f, "{h}").map_err(|e| Error::io(p, e))?;
    }
    writeln!(f, "id,x_km,y_km,site_class,role,annual_mean").map_err(|e| Error::io(p, e))?;
    for s in &ds.stations {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            s.id, s.x_km, s.y_km, s.site_class, s.role, s.annual_mean
        )
        .map_err(|e| Error::io(p, e))?;
    }

    let mut f = create(&paths.covariates)?;
    let p = paths.covariates.as_path();
    if let Some(h) = header {
        writeln!(f, "{h}").map_err(|e| Error::io(p, e))?;
    }
    let names: Vec<&String> = ds.covariates.names().collect();
    let mut line = String::from("id");
    for n in &names {
        line.push(',');
        line.push_str(n);
    }
    writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
    for (i, id) in ds.covariates.station_ids.iter().enumerate() {
        let mut line = id.clone();
        for j in 0..names.len() {
            line.push(',');
            line.push_str(&ds.covariates.values[(i, j)].to_string());
        }
        writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
    }

    let mut f = create(&paths.grouping)?;
    let p = paths.grouping.as_path();
    if let Some(h) = header {
        writeln!(f, "{h}").map_err(|e| Error::io(p, e))?;
    }
    writeln!(f, "covariate,group,transform").map_err(|e| Error::io(p, e))?;
    for group in [
        CovariateGroup::Global,
        CovariateGroup::Rural,
        CovariateGroup::Urban,
    ] {
        for n in ds.covariates.group_names(group) {
            writeln!(f, "{n},{group},identity").map_err(|e| Error::io(p, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn three_station_files(dir: &Path) -> DatasetPaths {
        write(
            dir,
            "stations.csv",
            "id,x_km,y_km,site_class,role,annual_mean\n\
             s3,10,0,urban,training,30.5\n\
             s1,0,0,rural,training,12\n\
             s2,0,10.5,rural,validation,1.5e1\n",
        );
        write(
            dir,
            "covariates.csv",
            "id,altitude,dist_sea,roads\r\ns1,100,0,1\r\ns2,300,25,2\r\ns3,500,100,3\r\n",
        );
        write(
            dir,
            "grouping.csv",
            "covariate,group,transform\naltitude,global,identity\ndist_sea,global,minmax_sqrt\nroads,urban,identity\n",
        );
        DatasetPaths::in_dir(dir)
    }

    #[test]
    fn loads_three_stations_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let paths = three_station_files(dir.path());
        let ds = load_dataset(&paths, &LoadOptions::default()).unwrap();
        let ids: Vec<_> = ds.stations.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["s1", "s2", "s3"]);
        assert_eq!(ds.covariates.global_names, ["altitude", "dist_sea"]);
        assert_eq!(ds.covariates.urban_names, ["roads"]);
        // dist_sea transformed: s2 -> sqrt(25/100)
        assert_eq!(ds.covariates.values[(1, 1)], 0.5);
        assert_eq!(ds.covariates.values[(2, 2)], 3.0);
        assert_eq!(ds.stations[1].annual_mean, 15.0);
        assert_eq!(ds.rural_training(), vec![0]);
        assert_eq!(ds.urban(), vec![2]);

        let again = load_dataset(&paths, &LoadOptions::default()).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn zero_concentration_names_station() {
        let dir = tempfile::tempdir().unwrap();
        let paths = three_station_files(dir.path());
        write(
            dir.path(),
            "stations.csv",
            "id,x_km,y_km,site_class,role,annual_mean\ns1,0,0,rural,training,12\ns2,0,10,rural,training,0\ns3,10,0,urban,training,3\n",
        );
        match load_dataset(&paths, &LoadOptions::default()).unwrap_err() {
            Error::Value { station, .. } => assert_eq!(station, "s2"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn row_count_mismatch_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let paths = three_station_files(dir.path());
        write(
            dir.path(),
            "covariates.csv",
            "id,altitude,dist_sea,roads\ns1,1,2,3\n",
        );
        assert!(matches!(
            load_dataset(&paths, &LoadOptions::default()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let paths = three_station_files(dir.path());
        write(
            dir.path(),
            "stations.csv",
            "id,x_km,site_class,role,annual_mean\ns1,0,rural,training,1\n",
        );
        let err = load_dataset(&paths, &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
        assert!(err.to_string().contains("y_km"), "{err}");
    }

    #[test]
    fn duplicate_id_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let paths = three_station_files(dir.path());
        write(
            dir.path(),
            "stations.csv",
            "id,x_km,y_km,site_class,role,annual_mean\ns1,0,0,rural,training,12\ns1,0,10,rural,training,4\ns3,10,0,urban,training,3\n",
        );
        assert!(matches!(
            load_dataset(&paths, &LoadOptions::default()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        assert!(matches!(
            load_dataset(&paths, &LoadOptions::default()),
            Err(Error::Io { .. })
        ));
    }
}
