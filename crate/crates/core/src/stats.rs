//! Small statistical helpers shared by the estimators.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf;

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard-normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard-normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard-normal quantile, polished with one Newton step on `normal_cdf`.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!(
            "normal quantile needs p in (0, 1), got {p}"
        )));
    }
    let mut x = -SQRT_2 * erf::erfc_inv(2.0 * p);
    let dens = normal_pdf(x);
    if dens > 1e-300 {
        // Work in the smaller tail to avoid cancellation.
        let step = if x > 0.0 {
            ((1.0 - p) - normal_cdf(-x)) / dens
        } else {
            (normal_cdf(x) - p) / dens
        };
        if step.is_finite() {
            x -= step;
        }
    }
    Ok(x)
}

/// Upper-tail probability of a chi-squared variable with `df` degrees of freedom.
pub fn chi2_sf(w: f64, df: usize) -> f64 {
    if w <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    (1.0 - dist.cdf(w)).clamp(0.0, 1.0)
}

/// `(1 - alpha)` quantile of a chi-squared variable.
pub fn chi2_quantile(prob: f64, df: usize) -> f64 {
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    dist.inverse_cdf(prob)
}

/// Empirical quantile by the ceiling-index order statistic: the
/// `ceil(q * m)`-th smallest of `m` values (1-based), clamped to `[1, m]`.
///
/// `sorted` must be ascending.
pub fn order_statistic(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    assert!(m > 0, "quantile of an empty sample");
    let rank = ((q * m as f64).ceil() as usize).clamp(1, m);
    sorted[rank - 1]
}

/// Sorts a copy (NaN-free input) and applies [`order_statistic`].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    order_statistic(&v, q)
}

/// Least-squares non-decreasing fit by pool-adjacent-violators.
pub fn isotonic(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.pop();
            let merged = (a * na as f64 + b * nb as f64) / (na + nb) as f64;
            *blocks.last_mut().unwrap() = (merged, na + nb);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(v, count)| std::iter::repeat_n(v, count))
        .collect()
}
