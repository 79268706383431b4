//! Exponential spatial correlation, Cholesky factors and Gaussian
//! conditioning (simple kriging of the zero-mean spatial effect).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

pub type Point = (f64, f64);

pub fn distance(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Symmetric matrix of Euclidean distances with a zero diagonal.
pub fn distance_matrix(points: &[Point]) -> DMatrix<f64> {
    let n = points.len();
    let mut d = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j + 1..n {
            let v = distance(points[i], points[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Distances from each new location (rows) to each site (columns).
pub fn cross_distances(new: &[Point], sites: &[Point]) -> DMatrix<f64> {
    DMatrix::from_fn(new.len(), sites.len(), |j, i| distance(new[j], sites[i]))
}

#[inline]
pub fn exp_correlation(d: f64, phi: f64) -> f64 {
    (-phi * d).exp()
}

/// Lower Cholesky factor, adding diagonal jitter of increasing size when the
/// plain factorization fails. Returns the factor and the jitter used.
pub fn cholesky_with_jitter(mat: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if let Some(c) = mat.clone().cholesky() {
        return Ok((c.unpack(), 0.0));
    }
    let n = mat.nrows();
    let scale = if n == 0 {
        1.0
    } else {
        mat.diagonal().mean().abs().max(f64::MIN_POSITIVE)
    };
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let mut m = mat.clone();
        for i in 0..n {
            m[(i, i)] += rel * scale;
        }
        if let Some(c) = m.cholesky() {
            return Ok((c.unpack(), rel * scale));
        }
        rel *= 10.0;
    }
    Err(Error::Factorization {
        context: String::new(),
        jitter: JITTER_MAX * scale,
    })
}

/// Correlation matrix `exp(-phi * d_ij)` of the monitored sites together
/// with its (possibly jittered) lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct CorrelationStructure {
    pub distances: Arc<DMatrix<f64>>,
    pub phi: f64,
    pub correlation: DMatrix<f64>,
    chol: DMatrix<f64>,
    jitter: f64,
}

impl CorrelationStructure {
    pub fn new(distances: Arc<DMatrix<f64>>, phi: f64) -> Result<Self> {
        let correlation = distances.map(|d| exp_correlation(d, phi));
        let (chol, jitter) = cholesky_with_jitter(&correlation)?;
        Ok(CorrelationStructure {
            distances,
            phi,
            correlation,
            chol,
            jitter,
        })
    }

    pub fn from_points(points: &[Point], phi: f64) -> Result<Self> {
        Self::new(Arc::new(distance_matrix(points)), phi)
    }

    pub fn len(&self) -> usize {
        self.correlation.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn cholesky_lower(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `L^{-1} b`
    pub fn whiten(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn whiten_columns(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `Sigma^{-1} b`
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let w = self.whiten(b);
        self.chol
            .tr_solve_lower_triangular(&w)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `v^T Sigma^{-1} v`
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        self.whiten(v).norm_squared()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }

    /// Log density of `MVN(0, sigma2 * Sigma)` at `v`.
    pub fn mvn_log_density(&self, v: &DVector<f64>, sigma2: f64) -> f64 {
        let n = self.len() as f64;
        -0.5 * (n * (2.0 * std::f64::consts::PI * sigma2).ln()
            + self.log_det()
            + self.quad_form(v) / sigma2)
    }
}

/// Correlations between new locations (rows) and monitored sites (columns).
#[derive(Debug, Clone)]
pub struct CrossCorrelation {
    pub delta: DMatrix<f64>,
}

impl CrossCorrelation {
    pub fn new(cross_distances: &DMatrix<f64>, phi: f64) -> Self {
        CrossCorrelation {
            delta: cross_distances.map(|d| exp_correlation(d, phi)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Per-location conditional mean `delta_j^T Sigma^{-1} m` and variance
/// `sigma2_m (1 - delta_j^T Sigma^{-1} delta_j)` of the spatial effect.
pub fn conditional_mvn(
    m_obs: &DVector<f64>,
    sigma2_m: f64,
    corr: &CorrelationStructure,
    cross: &CrossCorrelation,
) -> Vec<ConditionalMoments> {
    let w = corr.whiten_columns(&cross.delta.transpose());
    let wm = corr.whiten(m_obs);
    (0..w.ncols())
        .map(|j| {
            let col = w.column(j);
            ConditionalMoments {
                mean: col.dot(&wm),
                variance: (sigma2_m * (1.0 - col.norm_squared())).clamp(0.0, sigma2_m),
            }
        })
        .collect()
}

/// Joint conditional mean and covariance of the spatial effect at several
/// new locations. `target_corr` is their mutual correlation matrix.
pub fn conditional_mvn_joint(
    m_obs: &DVector<f64>,
    sigma2_m: f64,
    corr: &CorrelationStructure,
    cross: &CrossCorrelation,
    target_corr: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let w = corr.whiten_columns(&cross.delta.transpose());
    let wm = corr.whiten(m_obs);
    let mean = w.tr_mul(&wm);
    let mut cov = (target_corr - w.tr_mul(&w)) * sigma2_m;
    cov = (&cov + cov.transpose()) * 0.5;
    (mean, cov)
}

/// `sigma_m * L z` with `z` standard normal.
pub fn sample_mvn_zero_mean<R: Rng + ?Sized>(
    sigma2_m: f64,
    corr: &CorrelationStructure,
    rng: &mut R,
) -> DVector<f64> {
    let n = corr.len();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    corr.cholesky_lower() * z * sigma2_m.max(0.0).sqrt()
}

/// Draw from `N(mean, cov)` for a covariance that may be only positive
/// semi-definite.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let (l, _) = cholesky_with_jitter(cov)?;
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + l * z)
}
