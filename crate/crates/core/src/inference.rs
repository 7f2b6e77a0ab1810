//! Simultaneous confidence bands by Gaussian multiplier bootstrap, and a
//! Wald test for equality of complier parameters across two instruments.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::crossfit::{cross_fit_estimate, EstimateReport, EstimatorConfig};
use crate::dataset::IvDataset;
use crate::dictionary::DictionarySpec;
use crate::error::{Error, Result};
use crate::moments::Target;
use crate::stats::{chi2_sf, order_statistic};

/// Draws generated per independent stream.
pub const BLOCK: usize = 4096;
pub const MIN_DRAWS: usize = 1000;
/// Eigenvalues above `-PSD_TOL` are treated as zero.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandResult {
    pub c: f64,
    pub alpha: f64,
    #[serde(rename = "B")]
    pub draws: usize,
    pub seed: u64,
    /// Coordinates of `theta` covered by the band.
    pub coordinates: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BandResult {
    pub fn covers(&self, truth: &[f64]) -> bool {
        truth.len() == self.lower.len()
            && truth
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| l <= t && t <= u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaldTestResult {
    #[serde(rename = "W")]
    pub statistic: f64,
    pub df: usize,
    #[serde(rename = "p")]
    pub p_value: f64,
    pub alpha: f64,
    pub reject: bool,
}

/// Matrix square root `R` with `R R' = sigma`, from the symmetric eigen
/// decomposition.
pub fn psd_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(bad) = eig.eigenvalues.iter().find(|v| **v < -PSD_TOL) {
        return Err(Error::DegenerateCovariance(format!(
            "correlation matrix is not positive semi-definite (eigenvalue {bad:e})"
        )));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Sorted draws of `|Q|_inf` with `Q ~ N(0, R R')`.
pub fn max_abs_draws(root: &DMatrix<f64>, draws: usize, seed: u64) -> Vec<f64> {
    let d = root.nrows();
    let k = root.ncols();
    let blocks = draws.div_ceil(BLOCK);
    let mut out: Vec<f64> = (0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let count = BLOCK.min(draws - b * BLOCK);
            let mut eps = vec![0.0; k];
            let mut maxima = Vec::with_capacity(count);
            for _ in 0..count {
                for e in eps.iter_mut() {
                    *e = StandardNormal.sample(&mut rng);
                }
                let mut m = 0.0f64;
                for r in 0..d {
                    let q: f64 = (0..k).map(|c| root[(r, c)] * eps[c]).sum();
                    m = m.max(q.abs());
                }
                maxima.push(m);
            }
            maxima
        })
        .collect();
    out.sort_by(|a, b| a.total_cmp(b));
    out
}

/// Simultaneous band `theta_j +- c sqrt(C_jj / n)` at level `1 - alpha`.
pub fn simultaneous_band(
    theta: &[f64],
    cov: &DMatrix<f64>,
    n: usize,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Result<BandResult> {
    let d = theta.len();
    if cov.nrows() != d || cov.ncols() != d {
        return Err(Error::Shape(format!(
            "covariance is {}x{}, theta has {d} entries",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if d == 0 {
        return Err(Error::Shape("band over zero coordinates".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!(
            "band level alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if draws < MIN_DRAWS {
        return Err(Error::Config(format!(
            "bootstrap draws must be at least {MIN_DRAWS}, got {draws}"
        )));
    }
    if n == 0 {
        return Err(Error::Config("sample size must be positive".into()));
    }
    if let Some(j) = (0..d).find(|&j| !(cov[(j, j)] > 0.0 && cov[(j, j)].is_finite())) {
        return Err(Error::DegenerateCovariance(format!(
            "coordinate {j} has variance {}; the band needs strictly positive variances",
            cov[(j, j)]
        )));
    }
    let scale: Vec<f64> = (0..d).map(|j| cov[(j, j)].sqrt()).collect();
    let sigma = DMatrix::from_fn(d, d, |a, b| cov[(a, b)] / (scale[a] * scale[b]));
    let root = psd_sqrt(&sigma)?;
    let sorted = max_abs_draws(&root, draws, seed);
    let c = order_statistic(&sorted, 1.0 - alpha);
    let nf = n as f64;
    let half: Vec<f64> = scale.iter().map(|s| c * s / nf.sqrt()).collect();
    Ok(BandResult {
        c,
        alpha,
        draws,
        seed,
        coordinates: (0..d).collect(),
        lower: theta.iter().zip(&half).map(|(t, h)| t - h).collect(),
        upper: theta.iter().zip(&half).map(|(t, h)| t + h).collect(),
    })
}

/// Band over a subset of a report's coordinates (all when `coordinates` is `None`).
pub fn band_for_report(
    report: &EstimateReport,
    coordinates: Option<&[usize]>,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Result<BandResult> {
    let all: Vec<usize> = (0..report.theta.len()).collect();
    let idx = coordinates.unwrap_or(&all);
    if let Some(bad) = idx.iter().find(|&&j| j >= report.theta.len()) {
        return Err(Error::Shape(format!("band coordinate {bad} out of range")));
    }
    let cov = report.cov_matrix();
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| cov[(idx[a], idx[b])]);
    let theta: Vec<f64> = idx.iter().map(|&j| report.theta[j]).collect();
    let mut band = simultaneous_band(&theta, &sub, report.n_used, alpha, draws, seed)?;
    band.coordinates = idx.to_vec();
    Ok(band)
}

/// Wald statistic `n d' V^{-1} d` from paired scaled influence rows.
pub fn wald_from_influence(
    theta1: &[f64],
    theta2: &[f64],
    phi1: &[Vec<f64>],
    phi2: &[Vec<f64>],
    alpha: f64,
) -> Result<WaldTestResult> {
    let d = theta1.len();
    if theta2.len() != d || phi1.len() != phi2.len() {
        return Err(Error::Shape(
            "paired estimates must have matching shapes".into(),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!(
            "test level alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let delta: Vec<f64> = theta1.iter().zip(theta2).map(|(a, b)| a - b).collect();
    if delta.iter().all(|v| *v == 0.0) {
        return Ok(WaldTestResult {
            statistic: 0.0,
            df: d,
            p_value: 1.0,
            alpha,
            reject: false,
        });
    }
    let n = phi1.len();
    if n == 0 {
        return Err(Error::DegenerateCovariance("no shared observations".into()));
    }
    let mut v = DMatrix::zeros(d, d);
    for (a, b) in phi1.iter().zip(phi2) {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        for r in 0..d {
            for c in r..d {
                v[(r, c)] += diff[r] * diff[c];
            }
        }
    }
    v /= n as f64;
    for r in 0..d {
        for c in 0..r {
            v[(r, c)] = v[(c, r)];
        }
    }
    let chol = v.cholesky().ok_or_else(|| {
        Error::DegenerateCovariance("covariance of the estimate difference is singular".into())
    })?;
    let sol = chol.solve(&DVector::from_column_slice(&delta));
    let w = n as f64
        * delta
            .iter()
            .zip(sol.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>();
    let w = w.max(0.0);
    let p_value = chi2_sf(w, d);
    Ok(WaldTestResult {
        statistic: w,
        df: d,
        p_value,
        alpha,
        reject: p_value < alpha,
    })
}

/// Output of [`instrument_equality_test`].
#[derive(Debug, Clone)]
pub struct InstrumentComparison {
    pub first: EstimateReport,
    pub second: EstimateReport,
    pub test: WaldTestResult,
}

/// Tests whether two instruments identify the same complier parameters.
///
/// Both fits share the fold partition (it depends only on `n` and the seed).
/// The joint covariance of the difference comes from the paired scaled
/// influence rows on the observations retained by both fits.
pub fn instrument_equality_test(
    data: &IvDataset,
    second_instrument: &[f64],
    target: &Target,
    spec: &DictionarySpec,
    config: &EstimatorConfig,
    alpha: f64,
) -> Result<InstrumentComparison> {
    let other = data.with_instrument(second_instrument.to_vec())?;
    let first = cross_fit_estimate(data, target, spec, config)?;
    let second = cross_fit_estimate(&other, target, spec, config)?;
    let phi1 = first.scaled_influence()?;
    let phi2 = second.scaled_influence()?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let (mut i, mut j) = (0, 0);
    while i < first.retained.len() && j < second.retained.len() {
        match first.retained[i].cmp(&second.retained[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                a.push(phi1[i].clone());
                b.push(phi2[j].clone());
                i += 1;
                j += 1;
            }
        }
    }
    let test = wald_from_influence(&first.theta, &second.theta, &a, &b, alpha)?;
    Ok(InstrumentComparison {
        first,
        second,
        test,
    })
}
