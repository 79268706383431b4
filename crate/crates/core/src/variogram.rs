//! Empirical semivariograms and weighted least-squares fitting of the
//! exponential model `nugget + partial_sill * (1 - exp(-d / range))`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::spatial::{distance, Point};

const DEFAULT_BINS: usize = 30;
const MIN_FIT_BINS: usize = 4;
const RANGE_GRID: usize = 16;
const CORRELATION_THRESHOLD: f64 = 0.05;

/// Bin edges; bin `k` holds pairs with distance in `(edges[k], edges[k+1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSpec {
    pub edges: Vec<f64>,
}

impl BinSpec {
    pub fn equal_width(n_bins: usize, max_distance: f64) -> Self {
        let n = n_bins.max(1);
        BinSpec {
            edges: (0..=n)
                .map(|k| max_distance * k as f64 / n as f64)
                .collect(),
        }
    }

    /// Thirty equal-width bins up to half the largest pairwise distance.
    pub fn default_for(points: &[Point]) -> Self {
        let mut max = 0.0f64;
        for (i, &a) in points.iter().enumerate() {
            for &b in &points[i + 1..] {
                max = max.max(distance(a, b));
            }
        }
        Self::equal_width(DEFAULT_BINS, 0.5 * max)
    }

    fn locate(&self, d: f64) -> Option<usize> {
        let n = self.edges.len().checked_sub(1)?;
        if d <= self.edges[0] || d > self.edges[n] {
            return None;
        }
        // first edge >= d closes the bin
        let k = self.edges.partition_point(|&e| e < d);
        Some(k - 1)
    }
}

/// Restricts pairs to those whose separation azimuth (degrees clockwise
/// from north, undirected) lies within `tolerance_deg` of `angle_deg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Direction {
    pub angle_deg: f64,
    pub tolerance_deg: f64,
}

impl Direction {
    fn accepts(&self, a: Point, b: Point) -> bool {
        if self.tolerance_deg >= 90.0 {
            return true;
        }
        let azimuth = (b.0 - a.0).atan2(b.1 - a.1).to_degrees().rem_euclid(180.0);
        let diff = (azimuth - self.angle_deg.rem_euclid(180.0)).abs();
        diff.min(180.0 - diff) <= self.tolerance_deg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalVariogram {
    pub bin_centers: Vec<f64>,
    /// NaN where the bin is empty.
    pub gamma_hat: Vec<f64>,
    pub pair_counts: Vec<u64>,
    pub direction: Option<Direction>,
}

pub fn empirical_variogram(
    values: &[f64],
    points: &[Point],
    bins: &BinSpec,
    direction: Option<Direction>,
) -> Result<EmpiricalVariogram> {
    if values.len() != points.len() {
        return Err(Error::Config(format!(
            "{} values for {} points",
            values.len(),
            points.len()
        )));
    }
    if values.len() < 2 {
        return Err(Error::InsufficientData(
            "a variogram needs at least two stations".into(),
        ));
    }
    let nb = bins.edges.len().saturating_sub(1);
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0u64; nb];
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            if let Some(dir) = direction {
                if !dir.accepts(points[i], points[j]) {
                    continue;
                }
            }
            if let Some(k) = bins.locate(distance(points[i], points[j])) {
                let diff = values[i] - values[j];
                sums[k] += diff * diff;
                counts[k] += 1;
            }
        }
    }
    let gamma_hat = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| {
            if c == 0 {
                f64::NAN
            } else {
                s / (2.0 * c as f64)
            }
        })
        .collect();
    Ok(EmpiricalVariogram {
        bin_centers: bins.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
        gamma_hat,
        pair_counts: counts,
        direction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentialVariogramFit {
    pub nugget: f64,
    pub partial_sill: f64,
    pub range_param: f64,
    /// Distance at which the spatial correlation falls to 0.05.
    pub effective_range_05: f64,
    pub weighted_sse: f64,
    /// Set when every semivariance was zero and nothing could be fitted.
    pub degenerate: bool,
}

impl ExponentialVariogramFit {
    pub fn model(&self, d: f64) -> f64 {
        exponential_model(d, self.nugget, self.partial_sill, self.range_param)
    }

    pub fn total_sill(&self) -> f64 {
        self.nugget + self.partial_sill
    }
}

pub fn exponential_model(d: f64, nugget: f64, partial_sill: f64, range: f64) -> f64 {
    nugget + partial_sill * (1.0 - (-d / range).exp())
}

struct Bins {
    d: Vec<f64>,
    g: Vec<f64>,
    w: Vec<f64>,
}

impl Bins {
    fn sse(&self, nugget: f64, psill: f64, range: f64) -> f64 {
        self.d
            .iter()
            .zip(&self.g)
            .zip(&self.w)
            .map(|((&d, &g), &w)| {
                let r = g - exponential_model(d, nugget, psill, range);
                w * r * r
            })
            .sum()
    }

    /// Best non-negative `(nugget, partial_sill)` for a fixed range, with SSE.
    fn profile(&self, range: f64) -> (f64, f64, f64) {
        let basis: Vec<f64> = self.d.iter().map(|&d| 1.0 - (-d / range).exp()).collect();
        let (mut sw, mut sb, mut sbb, mut sg, mut sbg) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for ((&b, &g), &w) in basis.iter().zip(&self.g).zip(&self.w) {
            sw += w;
            sb += w * b;
            sbb += w * b * b;
            sg += w * g;
            sbg += w * b * g;
        }
        let mut candidates = vec![(0.0, 0.0)];
        let det = sw * sbb - sb * sb;
        if det > 1e-14 * sw * sbb {
            let c0 = (sbb * sg - sb * sbg) / det;
            let c1 = (sw * sbg - sb * sg) / det;
            if c0 >= 0.0 && c1 >= 0.0 {
                candidates.push((c0, c1));
            }
        }
        if sbb > 0.0 {
            candidates.push((0.0, (sbg / sbb).max(0.0)));
        }
        if sw > 0.0 {
            candidates.push(((sg / sw).max(0.0), 0.0));
        }
        candidates
            .into_iter()
            .map(|(c0, c1)| (c0, c1, self.sse(c0, c1, range)))
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .expect("at least one candidate")
    }
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-14 * (1.0 + a.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Gauss-Newton refinement in `(nugget, partial_sill, ln range)`, accepting
/// only steps that reduce the weighted SSE and keep parameters feasible.
fn polish(bins: &Bins, mut theta: [f64; 3], lo: f64, hi: f64) -> [f64; 3] {
    let mut sse = bins.sse(theta[0], theta[1], theta[2].exp());
    for _ in 0..100 {
        let range = theta[2].exp();
        let mut jtj = nalgebra::Matrix3::<f64>::zeros();
        let mut jtr = nalgebra::Vector3::<f64>::zeros();
        for ((&d, &g), &w) in bins.d.iter().zip(&bins.g).zip(&bins.w) {
            let e = (-d / range).exp();
            let r = g - exponential_model(d, theta[0], theta[1], range);
            // derivative wrt ln(range)
            let j = nalgebra::Vector3::new(1.0, 1.0 - e, -theta[1] * e * d / range);
            jtj += w * j * j.transpose();
            jtr += w * r * j;
        }
        let Some(step) = (jtj + nalgebra::Matrix3::identity() * 1e-300)
            .lu()
            .solve(&jtr)
        else {
            break;
        };
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand = [
                (theta[0] + scale * step[0]).max(0.0),
                (theta[1] + scale * step[1]).max(0.0),
                (theta[2] + scale * step[2]).clamp(lo.ln(), hi.ln()),
            ];
            let s = bins.sse(cand[0], cand[1], cand[2].exp());
            if s < sse {
                theta = cand;
                sse = s;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
    }
    theta
}

/// Weighted (by pair count) least-squares fit of the exponential model with
/// non-negative nugget and partial sill. The range is searched from a fixed
/// log-spaced grid of starting values; the best local optimum is refined by
/// Gauss-Newton.
pub fn fit_exponential_variogram(emp: &EmpiricalVariogram) -> Result<ExponentialVariogramFit> {
    let mut bins = Bins {
        d: Vec::new(),
        g: Vec::new(),
        w: Vec::new(),
    };
    for k in 0..emp.bin_centers.len() {
        if emp.pair_counts[k] > 0 && emp.gamma_hat[k].is_finite() {
            bins.d.push(emp.bin_centers[k]);
            bins.g.push(emp.gamma_hat[k]);
            bins.w.push(emp.pair_counts[k] as f64);
        }
    }
    if bins.d.len() < MIN_FIT_BINS {
        return Err(Error::InsufficientData(format!(
            "variogram fit needs at least {MIN_FIT_BINS} non-empty bins, got {}",
            bins.d.len()
        )));
    }
    let max_d = bins.d.iter().copied().fold(0.0, f64::max);
    let lo = 1e-3 * max_d;
    let hi = 10.0 * max_d;

    if bins.g.iter().all(|&g| g == 0.0) {
        return Ok(ExponentialVariogramFit {
            nugget: 0.0,
            partial_sill: 0.0,
            range_param: lo,
            effective_range_05: -lo * CORRELATION_THRESHOLD.ln(),
            weighted_sse: 0.0,
            degenerate: true,
        });
    }

    let grid: Vec<f64> = (0..RANGE_GRID)
        .map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (RANGE_GRID - 1) as f64).exp())
        .collect();
    let profile_sse = |ln_range: f64| bins.profile(ln_range.exp()).2;

    let mut best: Option<[f64; 3]> = None;
    let mut best_sse = f64::INFINITY;
    for k in 0..RANGE_GRID {
        let a = grid[k.saturating_sub(1)].ln();
        let b = grid[(k + 1).min(RANGE_GRID - 1)].ln();
        for ln_range in [grid[k].ln(), golden_section(profile_sse, a, b)] {
            let (c0, c1, sse) = bins.profile(ln_range.exp());
            if sse < best_sse {
                best_sse = sse;
                best = Some([c0, c1, ln_range]);
            }
        }
    }
    let theta = polish(&bins, best.expect("grid is non-empty"), lo, hi);
    let range = theta[2].exp();
    Ok(ExponentialVariogramFit {
        nugget: theta[0],
        partial_sill: theta[1],
        range_param: range,
        effective_range_05: -range * CORRELATION_THRESHOLD.ln(),
        weighted_sse: bins.sse(theta[0], theta[1], range),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(n: usize, size: f64, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (rng.random::<f64>() * size, rng.random::<f64>() * size))
            .collect()
    }

    #[test]
    fn constant_field_has_zero_semivariance() {
        let pts = points(20, 100.0, 1);
        let emp = empirical_variogram(&[3.0; 20], &pts, &BinSpec::default_for(&pts), None).unwrap();
        for (g, c) in emp.gamma_hat.iter().zip(&emp.pair_counts) {
            if *c > 0 {
                assert_eq!(*g, 0.0);
            }
        }
    }

    #[test]
    fn two_stations_one_bin() {
        let emp = empirical_variogram(
            &[1.0, 3.0],
            &[(0.0, 0.0), (3.0, 4.0)],
            &BinSpec::equal_width(1, 10.0),
            None,
        )
        .unwrap();
        assert_eq!(emp.gamma_hat, vec![2.0]);
        assert_eq!(emp.pair_counts, vec![1]);
        assert_eq!(emp.bin_centers, vec![5.0]);
    }

    #[test]
    fn fewer_than_two_stations() {
        assert!(matches!(
            empirical_variogram(&[1.0], &[(0.0, 0.0)], &BinSpec::equal_width(3, 1.0), None),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn matches_all_pairs_loop() {
        let pts = points(30, 500.0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
        let bins = BinSpec::equal_width(8, 400.0);
        let emp = empirical_variogram(&vals, &pts, &bins, None).unwrap();
        for k in 0..8 {
            let (lo, hi) = (bins.edges[k], bins.edges[k + 1]);
            let mut s = 0.0;
            let mut c = 0u64;
            for i in 0..30 {
                for j in 0..30 {
                    if i == j {
                        continue;
                    }
                    let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                    if d > lo && d <= hi {
                        s += (vals[i] - vals[j]).powi(2);
                        c += 1;
                    }
                }
            }
            // ordered pairs counted twice
            assert_eq!(emp.pair_counts[k] * 2, c);
            if c > 0 {
                assert!((emp.gamma_hat[k] - s / (2.0 * c as f64)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_tolerance_direction_equals_omnidirectional() {
        let pts = points(25, 300.0, 8);
        let vals: Vec<f64> = pts
            .iter()
            .map(|p| (p.0 / 50.0).sin() + p.1 / 300.0)
            .collect();
        let bins = BinSpec::default_for(&pts);
        let omni = empirical_variogram(&vals, &pts, &bins, None).unwrap();
        let dir = Direction {
            angle_deg: 37.0,
            tolerance_deg: 360.0,
        };
        let full = empirical_variogram(&vals, &pts, &bins, Some(dir)).unwrap();
        assert_eq!(omni.pair_counts, full.pair_counts);
        for (a, b) in omni.gamma_hat.iter().zip(&full.gamma_hat) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
    }

    #[test]
    fn directional_selection() {
        // east-west pair and north-south pair
        let pts = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)];
        let vals = [0.0, 1.0, 3.0];
        let bins = BinSpec::equal_width(1, 20.0);
        let ns = Direction {
            angle_deg: 0.0,
            tolerance_deg: 10.0,
        };
        let ew = Direction {
            angle_deg: 90.0,
            tolerance_deg: 10.0,
        };
        let v = empirical_variogram(&vals, &pts, &bins, Some(ns)).unwrap();
        assert_eq!(v.pair_counts[0], 1);
        assert_eq!(v.gamma_hat[0], 4.5);
        let v = empirical_variogram(&vals, &pts, &bins, Some(ew)).unwrap();
        assert_eq!(v.pair_counts[0], 1);
        assert_eq!(v.gamma_hat[0], 0.5);
    }

    fn model_bins(nugget: f64, psill: f64, range: f64) -> EmpiricalVariogram {
        let centers: Vec<f64> = (0..30).map(|k| 50.0 * (k as f64 + 0.5)).collect();
        EmpiricalVariogram {
            gamma_hat: centers
                .iter()
                .map(|&d| exponential_model(d, nugget, psill, range))
                .collect(),
            pair_counts: (0..30).map(|k| 100 + 7 * k as u64).collect(),
            bin_centers: centers,
            direction: None,
        }
    }

    #[test]
    fn recovers_noiseless_model() {
        let fit = fit_exponential_variogram(&model_bins(0.1, 0.35, 500.0)).unwrap();
        assert!((fit.nugget - 0.1).abs() < 1e-6, "{fit:?}");
        assert!((fit.partial_sill - 0.35).abs() < 1e-6, "{fit:?}");
        assert!((fit.range_param - 500.0).abs() < 1e-6, "{fit:?}");
        assert!((fit.effective_range_05 - 500.0 * 20f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn empty_bins_are_excluded() {
        let mut emp = model_bins(0.05, 0.2, 300.0);
        for k in [3, 9, 17] {
            emp.pair_counts[k] = 0;
            emp.gamma_hat[k] = f64::NAN;
        }
        let fit = fit_exponential_variogram(&emp).unwrap();
        assert!((fit.partial_sill - 0.2).abs() < 1e-6);
    }

    #[test]
    fn all_zero_is_degenerate() {
        let mut emp = model_bins(0.0, 0.0, 1.0);
        emp.gamma_hat.iter_mut().for_each(|g| *g = 0.0);
        let fit = fit_exponential_variogram(&emp).unwrap();
        assert!(fit.degenerate);
        assert_eq!((fit.nugget, fit.partial_sill), (0.0, 0.0));
    }

    #[test]
    fn too_few_bins() {
        let mut emp = model_bins(0.1, 0.3, 100.0);
        emp.pair_counts.iter_mut().skip(3).for_each(|c| *c = 0);
        assert!(matches!(
            fit_exponential_variogram(&emp),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn fit_beats_every_grid_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut emp = model_bins(0.08, 0.3, 400.0);
        for g in emp.gamma_hat.iter_mut() {
            *g *= 1.0 + 0.2 * (rng.random::<f64>() - 0.5);
        }
        let fit = fit_exponential_variogram(&emp).unwrap();
        let max_d = emp.bin_centers.iter().copied().fold(0.0, f64::max);
        let bins = Bins {
            d: emp.bin_centers.clone(),
            g: emp.gamma_hat.clone(),
            w: emp.pair_counts.iter().map(|&c| c as f64).collect(),
        };
        let (lo, hi) = (1e-3 * max_d, 10.0 * max_d);
        for k in 0..RANGE_GRID {
            let r = (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (RANGE_GRID - 1) as f64).exp();
            let (_, _, sse) = bins.profile(r);
            assert!(fit.weighted_sse <= sse + 1e-12);
        }
    }

    #[test]
    fn shift_invariant() {
        let pts = points(15, 100.0, 2);
        let vals: Vec<f64> = pts.iter().map(|p| p.0 * 0.01).collect();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 42.0).collect();
        let bins = BinSpec::equal_width(5, 80.0);
        let a = empirical_variogram(&vals, &pts, &bins, None).unwrap();
        let b = empirical_variogram(&shifted, &pts, &bins, None).unwrap();
        for (x, y) in a.gamma_hat.iter().zip(&b.gamma_hat) {
            assert!((x - y).abs() < 1e-9 || (x.is_nan() && y.is_nan()));
        }
    }
}
