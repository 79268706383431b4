//! Principal components of standardized climate variables.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const MIN_ROWS: usize = 10;

/// Correlation-scale PCA. Loadings are the leading eigenvectors of the
/// sample correlation matrix, ordered by decreasing eigenvalue, with each
/// column signed so its largest-magnitude entry is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub variable_names: Vec<String>,
    pub means: DVector<f64>,
    pub scales: DVector<f64>,
    /// `p x k`
    pub loadings: DMatrix<f64>,
    pub k: usize,
    /// Fraction of total (standardized) variance per retained component.
    pub variance_explained: DVector<f64>,
}

pub fn fit_pca(names: &[String], data: &DMatrix<f64>, k: usize) -> Result<PcaModel> {
    let (n, p) = data.shape();
    if names.len() != p {
        return Err(Error::Config(format!(
            "{} climate names for {p} columns",
            names.len()
        )));
    }
    if n < MIN_ROWS {
        return Err(Error::InsufficientData(format!(
            "PCA needs at least {MIN_ROWS} rows, got {n}"
        )));
    }
    if k == 0 || k > p {
        return Err(Error::Rank(format!(
            "cannot retain {k} components from {p} variables"
        )));
    }

    let means = DVector::from_fn(p, |j, _| data.column(j).mean());
    let scales = DVector::from_fn(p, |j, _| {
        let m = means[j];
        let ss: f64 = data.column(j).iter().map(|x| (x - m) * (x - m)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    for j in 0..p {
        if !(scales[j] > 0.0) {
            return Err(Error::Rank(format!(
                "climate variable {} is constant",
                names[j]
            )));
        }
    }
    let z = DMatrix::from_fn(n, p, |i, j| (data[(i, j)] - means[j]) / scales[j]);
    let corr = z.tr_mul(&z) / (n - 1) as f64;

    let eig = corr.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let total = p as f64;
    let tol = 1e-10 * total;
    let rank = eig.eigenvalues.iter().filter(|&&l| l > tol).count();
    if k > rank {
        return Err(Error::Rank(format!(
            "requested {k} components but climate matrix has numerical rank {rank}"
        )));
    }

    let mut loadings = DMatrix::zeros(p, k);
    let mut variance_explained = DVector::zeros(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        v /= v.norm();
        let pivot = v
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        if pivot < 0.0 {
            v.neg_mut();
        }
        loadings.set_column(c, &v);
        variance_explained[c] = eig.eigenvalues[idx].max(0.0) / total;
    }

    Ok(PcaModel {
        variable_names: names.to_vec(),
        means,
        scales,
        loadings,
        k,
        variance_explained,
    })
}

impl PcaModel {
    pub fn project(&self, row: &[f64]) -> DVector<f64> {
        project_pca(self, row)
    }
}

/// Scores of one observation: `loadings^T ((row - means) / scales)`.
pub fn project_pca(model: &PcaModel, row: &[f64]) -> DVector<f64> {
    assert_eq!(
        row.len(),
        model.means.len(),
        "row length must match PCA input width"
    );
    let z = DVector::from_fn(row.len(), |j, _| {
        (row[j] - model.means[j]) / model.scales[j]
    });
    model.loadings.tr_mul(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn names(p: usize) -> Vec<String> {
        (1..=p).map(|i| format!("clim{i}")).collect()
    }

    /// Two independent blocks: variables 0..4 share factor a, 4..9 share factor b.
    fn two_block(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DMatrix::zeros(n, 9);
        for i in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            for j in 0..9 {
                let e: f64 = rng.sample(StandardNormal);
                let f = if j < 4 { a } else { b };
                m[(i, j)] = 10.0 * j as f64 + (1.0 + j as f64) * (f + 0.3 * e);
            }
        }
        m
    }

    /// Cyclic Jacobi eigenvalue iteration.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    fn brute_force_correlation(data: &DMatrix<f64>) -> Vec<Vec<f64>> {
        let (n, p) = data.shape();
        let col = |j: usize| (0..n).map(move |i| data[(i, j)]);
        let mean = |j: usize| col(j).sum::<f64>() / n as f64;
        let mut c = vec![vec![0.0; p]; p];
        for a in 0..p {
            for b in 0..p {
                let (ma, mb) = (mean(a), mean(b));
                let mut sab = 0.0;
                let mut saa = 0.0;
                let mut sbb = 0.0;
                for i in 0..n {
                    let da = data[(i, a)] - ma;
                    let db = data[(i, b)] - mb;
                    sab += da * db;
                    saa += da * da;
                    sbb += db * db;
                }
                c[a][b] = sab / (saa * sbb).sqrt();
            }
        }
        c
    }

    #[test]
    fn two_blocks_match_jacobi_oracle() {
        let data = two_block(400, 11);
        let model = fit_pca(&names(9), &data, 9).unwrap();
        let oracle = jacobi_eigenvalues(brute_force_correlation(&data));
        for (c, &lambda) in oracle.iter().enumerate() {
            assert!(
                (model.variance_explained[c] - lambda / 9.0).abs() < 1e-10,
                "component {c}: {} vs {}",
                model.variance_explained[c],
                lambda / 9.0
            );
        }
        // the two block factors dominate
        let two = model.variance_explained[0] + model.variance_explained[1];
        assert!(two > 0.85, "two-block share {two}");
        // each of the first two components loads on one block only
        for c in 0..2 {
            let col = model.loadings.column(c);
            let first: f64 = (0..4).map(|j| col[j] * col[j]).sum();
            let second: f64 = (4..9).map(|j| col[j] * col[j]).sum();
            assert!(first.min(second) < 0.05, "component {c} mixes blocks");
        }
    }

    #[test]
    fn nearly_identical_columns_give_one_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = DMatrix::zeros(50, 9);
        for i in 0..50 {
            let base: f64 = rng.sample(StandardNormal);
            for j in 0..9 {
                let e: f64 = rng.sample(StandardNormal);
                data[(i, j)] = base + 1e-7 * e;
            }
        }
        let model = fit_pca(&names(9), &data, 1).unwrap();
        assert!((model.variance_explained[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn full_rank_is_complete_and_orthonormal() {
        let data = two_block(200, 5);
        let model = fit_pca(&names(9), &data, 9).unwrap();
        assert!((model.variance_explained.sum() - 1.0).abs() < 1e-10);
        let gram = model.loadings.tr_mul(&model.loadings);
        assert!((gram - DMatrix::identity(9, 9)).amax() < 1e-10);
        for c in 1..9 {
            assert!(model.variance_explained[c] <= model.variance_explained[c - 1]);
        }
        for c in 0..9 {
            let col = model.loadings.column(c);
            let pivot = col
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap();
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn projected_scores_reproduce_eigenvalues() {
        let data = two_block(300, 8);
        let model = fit_pca(&names(9), &data, 5).unwrap();
        let n = data.nrows();
        let scores: Vec<DVector<f64>> = (0..n)
            .map(|i| model.project(&data.row(i).iter().copied().collect::<Vec<_>>()))
            .collect();
        for c in 0..5 {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let var = crate::stats::sample_variance(&col);
            assert!((var / 9.0 - model.variance_explained[c]).abs() < 1e-8);
        }
    }

    #[test]
    fn projection_properties() {
        let data = two_block(100, 21);
        let model = fit_pca(&names(9), &data, 5).unwrap();
        let means: Vec<f64> = model.means.iter().copied().collect();
        assert!(model.project(&means).amax() < 1e-12);

        let row: Vec<f64> = (0..9)
            .map(|j| model.means[j] + model.scales[j] * model.loadings[(j, 0)])
            .collect();
        let s = model.project(&row);
        assert!((s[0] - 1.0).abs() < 1e-10);
        for c in 1..5 {
            assert!(s[c].abs() < 1e-10);
        }

        // dense multiply oracle on an arbitrary row
        let row: Vec<f64> = (0..9).map(|j| (j as f64).sin() * 7.0 + 3.0).collect();
        let s = model.project(&row);
        for c in 0..5 {
            let mut expected = 0.0;
            for j in 0..9 {
                expected += model.loadings[(j, c)] * (row[j] - model.means[j]) / model.scales[j];
            }
            assert!((s[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_input_is_rejected() {
        // columns 4..9 are exact copies of column 0
        let mut data = two_block(60, 2);
        for i in 0..60 {
            for j in 4..9 {
                data[(i, j)] = 2.0 * data[(i, 0)] + 1.0;
            }
        }
        let err = fit_pca(&names(9), &data, 7).unwrap_err();
        assert!(matches!(err, Error::Rank(_)), "{err}");
        assert!(fit_pca(&names(9), &data, 3).is_ok());
    }

    #[test]
    fn too_few_rows() {
        let data = two_block(9, 1);
        assert!(matches!(
            fit_pca(&names(9), &data, 2),
            Err(Error::InsufficientData(_))
        ));
    }
}
