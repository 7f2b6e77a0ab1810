//! Doubly robust moment systems for complier parameters.
//!
//! Every target shares one structure. The observation vector is
//! `V = (numerators..., D)` and `A(theta) = [I, -theta]`, so that
//!
//! ```text
//! psi(w) = A(theta) [gamma(1, x) - gamma(0, x)] + alpha(z, x) A(theta) [v - gamma(z, x)]
//!        = A(theta) eta(w)
//! ```
//!
//! with `eta = gamma(1, x) - gamma(0, x) + alpha(z, x) (v - gamma(z, x))`.
//!
//! Numerators by target:
//!
//! * LATE: `Y`
//! * complier characteristics: `D f(X)`
//! * counterfactual distributions on a grid `y_1 < ... < y_G`:
//!   `(D - 1) 1{Y <= y_g}` for all `g` (the `beta` block) followed by
//!   `D 1{Y <= y_g}` for all `g` (the `delta` block).
//!
//! For a single grid point this is the 3-vector `((D-1)1{Y<=y}, D 1{Y<=y}, D)`
//! with `A = [[1, 0, -beta], [0, 1, -delta]]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};

/// Smallest admissible `|mean eta_D|`.
pub const WEAK_FIRST_STAGE: f64 = 1e-10;

/// A covariate-level feature for complier characteristics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feature {
    /// Raw covariate column `j`.
    Covariate(usize),
    /// Coordinate `j` of the covariate dictionary `q(x)`.
    Dictionary(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Target {
    Late,
    Characteristics { features: Vec<Feature> },
    CounterfactualCdf { grid: Vec<f64> },
}

/// One observation `(y, d, z, x)`.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub y: f64,
    pub d: f64,
    pub z: f64,
    pub x: &'a [f64],
}

impl Target {
    pub fn validate(&self, k: usize, dict: Option<&Dictionary>) -> Result<()> {
        match self {
            Target::Late => Ok(()),
            Target::Characteristics { features } => {
                if features.is_empty() {
                    return Err(Error::Config(
                        "characteristics target needs at least one feature".into(),
                    ));
                }
                for f in features {
                    match *f {
                        Feature::Covariate(j) if j >= k => {
                            return Err(Error::Config(format!(
                                "covariate feature {j} out of range (k = {k})"
                            )))
                        }
                        Feature::Dictionary(j) => {
                            let w = dict.map(|d| d.q_width()).unwrap_or(0);
                            if j >= w {
                                return Err(Error::Config(format!(
                                    "dictionary feature {j} out of range (width {w})"
                                )));
                            }
                        }
                        _ => {}
                    }
                }
                Ok(())
            }
            Target::CounterfactualCdf { grid } => {
                if grid.is_empty() {
                    return Err(Error::Config("counterfactual grid is empty".into()));
                }
                if grid.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(
                        "counterfactual grid has a non-finite point".into(),
                    ));
                }
                if grid.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(
                        "counterfactual grid must be strictly ascending".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Dimension of `theta`.
    pub fn theta_dim(&self) -> usize {
        match self {
            Target::Late => 1,
            Target::Characteristics { features } => features.len(),
            Target::CounterfactualCdf { grid } => 2 * grid.len(),
        }
    }

    /// Width of `V` (`theta_dim + 1`).
    pub fn v_width(&self) -> usize {
        self.theta_dim() + 1
    }

    pub fn grid(&self) -> Option<&[f64]> {
        match self {
            Target::CounterfactualCdf { grid } => Some(grid),
            _ => None,
        }
    }

    /// Human-readable coordinate names, in `theta` order.
    pub fn labels(&self) -> Vec<String> {
        match self {
            Target::Late => vec!["late".into()],
            Target::Characteristics { features } => features
                .iter()
                .map(|f| match f {
                    Feature::Covariate(j) => format!("mean_x{j}"),
                    Feature::Dictionary(j) => format!("mean_q{j}"),
                })
                .collect(),
            Target::CounterfactualCdf { grid } => grid
                .iter()
                .map(|y| format!("beta({y})"))
                .chain(grid.iter().map(|y| format!("delta({y})")))
                .collect(),
        }
    }

    fn features_of(&self, x: &[f64], dict: Option<&Dictionary>, out: &mut Vec<f64>) -> Result<()> {
        if let Target::Characteristics { features } = self {
            let mut q = None;
            for f in features {
                match *f {
                    Feature::Covariate(j) => out.push(*x.get(j).ok_or_else(|| {
                        Error::Shape(format!("covariate {j} missing from width-{} row", x.len()))
                    })?),
                    Feature::Dictionary(j) => {
                        if q.is_none() {
                            let d = dict.ok_or_else(|| {
                                Error::Config("dictionary features need a dictionary".into())
                            })?;
                            q = Some(d.q(x)?);
                        }
                        let qv = q.as_ref().unwrap();
                        out.push(*qv.get(j).ok_or_else(|| {
                            Error::Shape(format!("dictionary coordinate {j} out of range"))
                        })?);
                    }
                }
            }
        }
        Ok(())
    }
}

/// The counterfactual-distribution vector at a single grid point.
pub fn cdf_v(grid_point: f64, obs: &Observation<'_>) -> [f64; 3] {
    let below = if obs.y <= grid_point { 1.0 } else { 0.0 };
    [(obs.d - 1.0) * below, obs.d * below, obs.d]
}

/// The observation vector `V` for `target`.
pub fn build_v(
    target: &Target,
    obs: &Observation<'_>,
    dict: Option<&Dictionary>,
) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(target.v_width());
    match target {
        Target::Late => v.push(obs.y),
        Target::Characteristics { .. } => {
            target.features_of(obs.x, dict, &mut v)?;
            for f in v.iter_mut() {
                *f *= obs.d;
            }
        }
        Target::CounterfactualCdf { grid } => {
            v.extend(grid.iter().map(|&g| cdf_v(g, obs)[0]));
            v.extend(grid.iter().map(|&g| cdf_v(g, obs)[1]));
        }
    }
    v.push(obs.d);
    Ok(v)
}

/// `A(theta) = [I, -theta]`.
pub fn a_matrix(target: &Target, theta: &[f64]) -> Result<DMatrix<f64>> {
    let d = target.theta_dim();
    if theta.len() != d {
        return Err(Error::Shape(format!(
            "theta has length {}, target expects {d}",
            theta.len()
        )));
    }
    Ok(DMatrix::from_fn(d, d + 1, |r, c| {
        if c == d {
            -theta[r]
        } else if r == c {
            1.0
        } else {
            0.0
        }
    }))
}

/// Regression values entering the moment at one observation.
#[derive(Debug, Clone, Copy)]
pub struct GammaAt<'a> {
    pub at_one: &'a [f64],
    pub at_zero: &'a [f64],
    pub at_observed: &'a [f64],
}

/// `eta = gamma(1,x) - gamma(0,x) + alpha (v - gamma(z,x))`.
pub fn eta(v: &[f64], gamma: &GammaAt<'_>, alpha: f64) -> Result<Vec<f64>> {
    let j = v.len();
    if gamma.at_one.len() != j || gamma.at_zero.len() != j || gamma.at_observed.len() != j {
        return Err(Error::Shape(format!(
            "regression values must all have width {j}"
        )));
    }
    Ok((0..j)
        .map(|c| gamma.at_one[c] - gamma.at_zero[c] + alpha * (v[c] - gamma.at_observed[c]))
        .collect())
}

/// `A(theta) eta`, written out without forming the matrix.
pub fn apply_a(eta: &[f64], theta: &[f64]) -> Vec<f64> {
    let d = theta.len();
    (0..d).map(|r| eta[r] - theta[r] * eta[d]).collect()
}

/// `psi = m + phi` with `m = A(theta)[gamma(1,x) - gamma(0,x)]` and
/// `phi = alpha A(theta)[v - gamma(z,x)]`.
pub fn psi(v: &[f64], gamma: &GammaAt<'_>, alpha: f64, theta: &[f64]) -> Result<Vec<f64>> {
    if v.len() != theta.len() + 1 {
        return Err(Error::Shape(format!(
            "V has width {}, theta has dimension {}",
            v.len(),
            theta.len()
        )));
    }
    let contrast: Vec<f64> = gamma
        .at_one
        .iter()
        .zip(gamma.at_zero)
        .map(|(a, b)| a - b)
        .collect();
    let resid: Vec<f64> = v
        .iter()
        .zip(gamma.at_observed)
        .map(|(a, b)| a - b)
        .collect();
    if contrast.len() != v.len() || resid.len() != v.len() {
        return Err(Error::Shape(
            "regression values have the wrong width".into(),
        ));
    }
    let m = apply_a(&contrast, theta);
    let phi = apply_a(&resid, theta);
    Ok(m.iter().zip(&phi).map(|(a, b)| a + alpha * b).collect())
}

/// Exact root of `A(theta) eta_bar = 0`: `theta_j = eta_bar_j / eta_bar_D`.
pub fn solve_theta(eta_mean: &[f64], target: &Target) -> Result<Vec<f64>> {
    if eta_mean.len() != target.v_width() {
        return Err(Error::Shape(format!(
            "mean eta has width {}, target expects {}",
            eta_mean.len(),
            target.v_width()
        )));
    }
    let d = target.theta_dim();
    let denom = eta_mean[d];
    if !(denom.abs() >= WEAK_FIRST_STAGE) {
        return Err(Error::WeakFirstStage {
            contrast: denom,
            fold_contrasts: Vec::new(),
        });
    }
    Ok(eta_mean[..d].iter().map(|v| v / denom).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(y: f64, d: f64, z: f64, x: &[f64]) -> Observation<'_> {
        Observation { y, d, z, x }
    }

    #[test]
    fn v_vectors() {
        assert_eq!(
            build_v(&Target::Late, &obs(2.0, 1.0, 1.0, &[0.0]), None).unwrap(),
            vec![2.0, 1.0]
        );
        let chars = Target::Characteristics {
            features: vec![Feature::Covariate(0)],
        };
        assert_eq!(
            build_v(&chars, &obs(1.0, 0.0, 1.0, &[3.0]), None).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            build_v(&chars, &obs(1.0, 1.0, 1.0, &[3.0]), None).unwrap(),
            vec![3.0, 1.0]
        );
        assert_eq!(cdf_v(0.0, &obs(-1.0, 0.0, 0.0, &[0.0])), [-1.0, 0.0, 0.0]);
        let cdf = Target::CounterfactualCdf { grid: vec![0.0] };
        assert_eq!(
            build_v(&cdf, &obs(-1.0, 0.0, 0.0, &[0.0]), None).unwrap(),
            vec![-1.0, 0.0, 0.0]
        );
        // equality counts as below the grid point
        assert_eq!(cdf_v(1.0, &obs(1.0, 1.0, 1.0, &[0.0])), [0.0, 1.0, 1.0]);
    }

    #[test]
    fn stacked_cdf_layout() {
        let cdf = Target::CounterfactualCdf {
            grid: vec![0.0, 1.0, 2.0],
        };
        let v = build_v(&cdf, &obs(0.5, 1.0, 1.0, &[0.0]), None).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(cdf.labels()[0], "beta(0)");
        assert_eq!(cdf.labels()[3], "delta(0)");
    }

    #[test]
    fn a_matrices() {
        let a = a_matrix(&Target::Late, &[2.0]).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(1, 2, &[1.0, -2.0]));
        let a = a_matrix(&Target::CounterfactualCdf { grid: vec![0.0] }, &[0.6, 0.2]).unwrap();
        assert_eq!(
            a,
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -0.6, 0.0, 1.0, -0.2])
        );
        let chars = Target::Characteristics {
            features: vec![Feature::Covariate(0), Feature::Covariate(1)],
        };
        let a = a_matrix(&chars, &[1.0, 1.0]).unwrap();
        assert_eq!(
            a,
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -1.0, 0.0, 1.0, -1.0])
        );
        assert!(matches!(a_matrix(&chars, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn psi_worked_example() {
        let gamma = GammaAt {
            at_one: &[1.5, 0.8],
            at_zero: &[0.5, 0.2],
            at_observed: &[1.5, 0.8],
        };
        let v = [2.0, 1.0];
        let val = psi(&v, &gamma, 2.0, &[1.0]).unwrap();
        assert!((val[0] - 1.0).abs() < 1e-15);
        // alpha = 0 leaves m only
        let m = psi(&v, &gamma, 0.0, &[1.0]).unwrap();
        assert!((m[0] - 0.4).abs() < 1e-15);
        // gamma = 0 leaves alpha A v
        let zero = GammaAt {
            at_one: &[0.0, 0.0],
            at_zero: &[0.0, 0.0],
            at_observed: &[0.0, 0.0],
        };
        assert_eq!(
            psi(&v, &zero, 2.0, &[1.0]).unwrap(),
            vec![2.0 * (2.0 - 1.0)]
        );
        let e = eta(&v, &gamma, 2.0).unwrap();
        assert_eq!(apply_a(&e, &[1.0]), val);
    }

    #[test]
    fn theta_solutions() {
        assert_eq!(solve_theta(&[2.0, 0.5], &Target::Late).unwrap(), vec![4.0]);
        let cdf = Target::CounterfactualCdf { grid: vec![0.0] };
        let th = solve_theta(&[0.3, 0.1, 0.5], &cdf).unwrap();
        assert!((th[0] - 0.6).abs() < 1e-15 && (th[1] - 0.2).abs() < 1e-15);
        assert!(matches!(
            solve_theta(&[1.0, 0.0], &Target::Late),
            Err(Error::WeakFirstStage { .. })
        ));
    }

    #[test]
    fn grid_validation() {
        assert!(Target::CounterfactualCdf {
            grid: vec![1.0, 0.0]
        }
        .validate(1, None)
        .is_err());
        assert!(Target::CounterfactualCdf {
            grid: vec![0.0, 0.0]
        }
        .validate(1, None)
        .is_err());
        assert!(Target::CounterfactualCdf { grid: vec![] }
            .validate(1, None)
            .is_err());
        assert!(Target::CounterfactualCdf {
            grid: vec![0.0, 1.0]
        }
        .validate(1, None)
        .is_ok());
        assert!(Target::Characteristics {
            features: vec![Feature::Covariate(2)]
        }
        .validate(2, None)
        .is_err());
    }

    proptest::proptest! {
        #[test]
        fn psi_is_affine_in_theta(
            v in proptest::collection::vec(-3.0f64..3.0, 3),
            g1 in proptest::collection::vec(-3.0f64..3.0, 3),
            g0 in proptest::collection::vec(-3.0f64..3.0, 3),
            gz in proptest::collection::vec(-3.0f64..3.0, 3),
            alpha in -5.0f64..5.0,
            t1 in proptest::collection::vec(-2.0f64..2.0, 2),
            t2 in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let gamma = GammaAt { at_one: &g1, at_zero: &g0, at_observed: &gz };
            let e = eta(&v, &gamma, alpha).unwrap();
            let p1 = psi(&v, &gamma, alpha, &t1).unwrap();
            let p2 = psi(&v, &gamma, alpha, &t2).unwrap();
            for r in 0..2 {
                let lhs = p1[r] - p2[r];
                let rhs = -(t1[r] - t2[r]) * e[2];
                proptest::prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }
}
