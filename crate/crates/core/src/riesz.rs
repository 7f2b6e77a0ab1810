//! Automatic balancing weights: the Riesz representer of the instrument
//! contrast `gamma -> E[gamma(1, X) - gamma(0, X)]`, learned as a sparse
//! linear combination of the dictionary.
//!
//! Each fit minimizes `rho' G rho - 2 rho' M + 2 lambda sum_j w_j |rho_j|` with
//! `G = mean b_i b_i'` and `M = mean (b(1, x_i) - b(0, x_i))`. In tuned mode
//! the penalty loadings `w_j` are re-estimated from the per-observation score
//! `b_i b_i' rho - (b(1, x_i) - b(0, x_i))` until `rho` settles.
//!
//! The same loop fits Lasso regressions (score `b_i (b_i' beta - v_i)`), which
//! is how the outcome regressions are tuned in [`crate::crossfit`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::{Dictionary, SubDictionary};
use crate::error::{Error, Result};
use crate::optim::{solve_quadratic_lasso, QuadraticProblem};
use crate::stats::normal_quantile;

/// Tuning constants of the iterative penalty loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RieszHyper {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub ridge_on_norm: f64,
    pub max_outer_iter: usize,
    pub lambda_multiplier: f64,
    /// Outer-loop stopping rule on `|rho_new - rho_old|_inf`.
    pub outer_tol: f64,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
}

impl Default for RieszHyper {
    fn default() -> Self {
        RieszHyper {
            c1: 1.0,
            c2: 0.1,
            c3: 0.1,
            ridge_on_norm: 0.2,
            max_outer_iter: 10,
            lambda_multiplier: 1.0,
            outer_tol: 1e-6,
            solver_tol: 1e-9,
            solver_max_iter: 10_000,
        }
    }
}

impl RieszHyper {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("ridge_on_norm", self.ridge_on_norm),
            ("lambda_multiplier", self.lambda_multiplier),
            ("outer_tol", self.outer_tol),
            ("solver_tol", self.solver_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_outer_iter == 0 || self.solver_max_iter == 0 {
            return Err(Error::Config("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

/// How the penalty level is chosen for a fold fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Penalty {
    /// Data-driven loadings and the quantile-based level.
    Tuned(RieszHyper),
    /// A single given level with unit loadings.
    Fixed { lambda: f64 },
}

impl Default for Penalty {
    fn default() -> Self {
        Penalty::Tuned(RieszHyper::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RieszFit {
    pub rho: Vec<f64>,
    pub lambda_used: f64,
    /// Per-coordinate normalization before the ridge constant is added.
    pub d_norm: Vec<f64>,
    pub penalty_weights: Vec<f64>,
    pub tuning_iterations: usize,
    /// `|M - G rho|_inf`.
    pub balance_sup_norm: f64,
    pub sparsity: usize,
    pub converged: bool,
    pub kkt_violation: f64,
    /// The sub-dictionary Gram was singular and a pseudo-inverse was used.
    pub init_fallback: bool,
}

impl RieszFit {
    pub fn max_penalty_weight(&self) -> f64 {
        self.penalty_weights.iter().copied().fold(0.0, f64::max)
    }

    /// Upper bound on `balance_sup_norm` implied by the optimality conditions.
    pub fn balance_bound(&self, tol: f64) -> f64 {
        self.lambda_used * self.max_penalty_weight() + tol
    }

    pub fn predict_row(&self, basis_row: &[f64]) -> f64 {
        basis_row.iter().zip(&self.rho).map(|(b, r)| b * r).sum()
    }
}

/// `G = (1/n) sum b_i b_i'` and `M = (1/n) sum delta_i`.
pub fn compute_moments(
    basis: &DMatrix<f64>,
    contrast: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if basis.nrows() != contrast.nrows() || basis.ncols() != contrast.ncols() {
        return Err(Error::Shape(format!(
            "basis is {}x{}, contrast is {}x{}",
            basis.nrows(),
            basis.ncols(),
            contrast.nrows(),
            contrast.ncols()
        )));
    }
    if basis.nrows() == 0 {
        return Err(Error::Shape("no rows".into()));
    }
    let n = basis.nrows() as f64;
    let g = gram(basis);
    let m = DVector::from_iterator(
        contrast.ncols(),
        contrast.column_iter().map(|c| c.iter().sum::<f64>() / n),
    );
    Ok((g, m))
}

/// `(1/n) B'B`, exactly symmetric.
pub fn gram(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let n = basis.nrows() as f64;
    let mut g = basis.tr_mul(basis) / n;
    for a in 0..g.nrows() {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

/// `lambda = c1 / sqrt(n_f) * Phi^{-1}(1 - c2 / (2p))`.
pub fn theoretical_lambda(n_f: usize, p: usize, c1: f64, c2: f64) -> Result<f64> {
    if n_f < 2 || p < 1 {
        return Err(Error::Config(format!(
            "theoretical lambda needs n_f >= 2 and p >= 1, got n_f={n_f}, p={p}"
        )));
    }
    if !(c2 > 0.0 && c2 < 2.0 * p as f64) || !(c1 > 0.0 && c1.is_finite()) {
        return Err(Error::Config(format!(
            "theoretical lambda needs c1 > 0 and 0 < c2 < 2p, got c1={c1}, c2={c2}"
        )));
    }
    Ok(c1 / (n_f as f64).sqrt() * normal_quantile(1.0 - c2 / (2.0 * p as f64))?)
}

/// Which moment the penalized fit targets.
#[derive(Debug, Clone, Copy)]
pub enum Moment<'a> {
    /// Balancing weight: rows of `b(1, x_i) - b(0, x_i)`.
    Balancing { contrast: &'a DMatrix<f64> },
    /// Least-squares projection of a response onto the basis.
    Regression { response: &'a DVector<f64> },
}

impl Moment<'_> {
    fn linear_term(&self, basis: &DMatrix<f64>) -> Result<DVector<f64>> {
        let n = basis.nrows() as f64;
        match self {
            Moment::Balancing { contrast } => Ok(compute_moments(basis, contrast)?.1),
            Moment::Regression { response } => {
                if response.len() != basis.nrows() {
                    return Err(Error::Shape(format!(
                        "response has length {}, basis has {} rows",
                        response.len(),
                        basis.nrows()
                    )));
                }
                Ok(basis.tr_mul(response) / n)
            }
        }
    }

    /// `sqrt(mean_i s_ij^2)` for the per-observation score `s_i`.
    fn score_norm(&self, basis: &DMatrix<f64>, coef: &DVector<f64>) -> DVector<f64> {
        let n = basis.nrows();
        let p = basis.ncols();
        let fitted = basis * coef;
        let mut acc = DVector::zeros(p);
        for i in 0..n {
            for j in 0..p {
                let s = match self {
                    Moment::Balancing { contrast } => basis[(i, j)] * fitted[i] - contrast[(i, j)],
                    Moment::Regression { response } => basis[(i, j)] * (fitted[i] - response[i]),
                };
                acc[j] += s * s;
            }
        }
        acc.map(|v: f64| (v / n as f64).sqrt())
    }
}

/// Solves `G_low^{-1} M_low` on the sub-dictionary and pads with zeros.
fn initialize(
    g: &DMatrix<f64>,
    m: &DVector<f64>,
    sub: &SubDictionary,
) -> Result<(DVector<f64>, bool)> {
    let p = m.len();
    let idx = &sub.indices;
    if idx.iter().any(|&j| j >= p) {
        return Err(Error::Shape("sub-dictionary index out of range".into()));
    }
    let s = idx.len();
    let g_low = DMatrix::from_fn(s, s, |a, b| g[(idx[a], idx[b])]);
    let m_low = DVector::from_fn(s, |a, _| m[idx[a]]);
    let (sol, fallback) = match g_low.clone().cholesky() {
        Some(ch) if ch.l().diagonal().iter().all(|d| *d > 1e-10) => (ch.solve(&m_low), false),
        _ => {
            let pinv = g_low
                .pseudo_inverse(1e-10)
                .map_err(|e| Error::Config(format!("sub-dictionary pseudo-inverse failed: {e}")))?;
            (pinv * m_low, true)
        }
    };
    let mut rho = DVector::zeros(p);
    for (a, &j) in idx.iter().enumerate() {
        rho[j] = sol[a];
    }
    Ok((rho, fallback))
}

/// Penalized fit of one moment on the rows of a fold complement.
///
/// `gram` must be `(1/n) B'B` for the same `basis`; it is passed in so that a
/// fold can share one Gram matrix across many fits.
pub fn fit_penalized(
    basis: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    moment: Moment<'_>,
    intercepts: &[usize],
    sub: &SubDictionary,
    penalty: &Penalty,
) -> Result<RieszFit> {
    let n = basis.nrows();
    let p = basis.ncols();
    if gram.nrows() != p || gram.ncols() != p {
        return Err(Error::Shape(format!(
            "Gram is {}x{}, basis has {p} columns",
            gram.nrows(),
            gram.ncols()
        )));
    }
    let m = moment.linear_term(basis)?;

    match penalty {
        Penalty::Fixed { lambda } => {
            let problem = QuadraticProblem::new(gram.clone(), m.clone(), *lambda).with_tol(1e-10);
            let res = solve_quadratic_lasso(&problem)?;
            Ok(finish(
                gram,
                &m,
                res.solution,
                *lambda,
                vec![0.0; p],
                vec![1.0; p],
                1,
                res.converged,
                res.kkt_violation,
                false,
            ))
        }
        Penalty::Tuned(hyper) => {
            hyper.validate()?;
            let min_rows = (p / 10).max(20);
            if n < min_rows {
                return Err(Error::Config(format!(
                    "fold complement has {n} rows; at least {min_rows} are needed for p = {p}"
                )));
            }
            let lambda = theoretical_lambda(n, p, hyper.c1, hyper.c2)? * hyper.lambda_multiplier;
            if !(lambda > 0.0) {
                return Err(Error::Config(format!(
                    "penalty level is {lambda}; it must be positive"
                )));
            }
            let (mut rho, fallback) = initialize(gram, &m, sub)?;
            let mut d_norm = DVector::zeros(p);
            let mut weights = DVector::zeros(p);
            let mut converged = false;
            let mut kkt = f64::INFINITY;
            let mut iterations = 0;
            for _ in 0..hyper.max_outer_iter {
                iterations += 1;
                d_norm = moment.score_norm(basis, &rho);
                weights = DVector::from_fn(p, |j, _| {
                    let loading = d_norm[j] + hyper.ridge_on_norm;
                    if intercepts.contains(&j) {
                        hyper.c3 * loading
                    } else {
                        loading
                    }
                });
                let problem = QuadraticProblem::new(gram.clone(), m.clone(), lambda)
                    .with_weights(weights.clone())
                    .with_init(rho.clone())
                    .with_tol(hyper.solver_tol)
                    .with_max_iter(hyper.solver_max_iter);
                let res = solve_quadratic_lasso(&problem)?;
                converged = res.converged;
                kkt = res.kkt_violation;
                let change = (&res.solution - &rho).amax();
                rho = res.solution;
                if change < hyper.outer_tol {
                    break;
                }
            }
            Ok(finish(
                gram,
                &m,
                rho,
                lambda,
                d_norm.iter().copied().collect(),
                weights.iter().copied().collect(),
                iterations,
                converged,
                kkt,
                fallback,
            ))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    g: &DMatrix<f64>,
    m: &DVector<f64>,
    rho: DVector<f64>,
    lambda: f64,
    d_norm: Vec<f64>,
    penalty_weights: Vec<f64>,
    tuning_iterations: usize,
    converged: bool,
    kkt_violation: f64,
    init_fallback: bool,
) -> RieszFit {
    let balance = (m - g * &rho).amax();
    RieszFit {
        sparsity: rho.iter().filter(|v| **v != 0.0).count(),
        rho: rho.iter().copied().collect(),
        lambda_used: lambda,
        d_norm,
        penalty_weights,
        tuning_iterations,
        balance_sup_norm: balance,
        converged,
        kkt_violation,
        init_fallback,
    }
}

/// Balancing-weight fit on fold-complement rows (`basis` = `b(Z_i, X_i)`,
/// `contrast` = `b(1, X_i) - b(0, X_i)`).
pub fn fit_balancing_weight(
    basis: &DMatrix<f64>,
    contrast: &DMatrix<f64>,
    dict: &Dictionary,
    penalty: &Penalty,
) -> Result<RieszFit> {
    if basis.ncols() != dict.p() {
        return Err(Error::Shape(format!(
            "basis has {} columns, dictionary has p = {}",
            basis.ncols(),
            dict.p()
        )));
    }
    let g = gram(basis);
    fit_penalized(
        basis,
        &g,
        Moment::Balancing { contrast },
        &dict.intercepts(),
        &dict.sub_dictionary(),
        penalty,
    )
}

/// `b(z, x)' rho`.
pub fn predict_alpha(fit: &RieszFit, dict: &Dictionary, z: f64, x: &[f64]) -> Result<f64> {
    if fit.rho.len() != dict.p() {
        return Err(Error::Shape(format!(
            "fit has {} coefficients, dictionary has p = {}",
            fit.rho.len(),
            dict.p()
        )));
    }
    Ok(fit.predict_row(&dict.expand(z, x)?))
}

/// Sample-balance sup-norms for a split-layout fit:
/// `|mean q - mean q Z w1|_inf` and `|mean q - mean q (1-Z) (-w0)|_inf` with
/// `w1 = q' rho_(z=1)` and `w0 = q' rho_(z=0)` (`w0` is negative, so `-w0` is
/// the weight placed on the `Z = 0` group).
pub fn split_balance(q_rows: &DMatrix<f64>, z: &[f64], rho: &[f64]) -> Result<(f64, f64)> {
    let w = q_rows.ncols();
    if rho.len() != 2 * w || z.len() != q_rows.nrows() {
        return Err(Error::Shape(
            "split balance needs rho of length 2 * width(q) and one z per row".into(),
        ));
    }
    let n = q_rows.nrows() as f64;
    let mut gap1 = vec![0.0; w];
    let mut gap0 = vec![0.0; w];
    for i in 0..q_rows.nrows() {
        let q = q_rows.row(i);
        let w1: f64 = (0..w).map(|j| q[j] * rho[j]).sum();
        let w0: f64 = (0..w).map(|j| q[j] * rho[w + j]).sum();
        for j in 0..w {
            gap1[j] += q[j] - q[j] * z[i] * w1;
            gap0[j] += q[j] + q[j] * (1.0 - z[i]) * w0;
        }
    }
    let sup = |v: &[f64]| v.iter().map(|g| (g / n).abs()).fold(0.0, f64::max);
    Ok((sup(&gap1), sup(&gap0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{DictionarySpec, Layout};

    #[test]
    fn moments_by_hand() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let c = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let (g, m) = compute_moments(&b, &c).unwrap();
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 0.5]));
        assert_eq!(m, DVector::from_vec(vec![0.0, 1.0]));

        let (g, m) = compute_moments(
            &DMatrix::from_element(1, 1, 2.0),
            &DMatrix::from_element(1, 1, 3.0),
        )
        .unwrap();
        assert_eq!(g[(0, 0)], 4.0);
        assert_eq!(m[0], 3.0);
    }

    #[test]
    fn moments_shape_mismatch() {
        let b = DMatrix::zeros(3, 2);
        let c = DMatrix::zeros(2, 2);
        assert!(matches!(compute_moments(&b, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn lambda_formula() {
        let l = theoretical_lambda(800, 10, 1.0, 0.1).unwrap();
        assert!((l - 2.575_829_303_548_900_4 / 800f64.sqrt()).abs() < 1e-14);
        assert!((l - 0.09107).abs() < 1e-5);
        assert_eq!(theoretical_lambda(100, 1, 1.0, 1.0).unwrap(), 0.0);
        let doubled = theoretical_lambda(800, 10, 2.0, 0.1).unwrap();
        assert!((doubled - 2.0 * l).abs() < 1e-15);
        assert!(theoretical_lambda(1, 10, 1.0, 0.1).is_err());
        assert!(theoretical_lambda(100, 1, 1.0, 2.0).is_err());
    }

    #[test]
    fn zero_lambda_rejected_in_tuned_fit() {
        let basis = DMatrix::from_fn(40, 2, |i, j| if j == 0 { 1.0 } else { (i % 2) as f64 });
        let contrast = DMatrix::from_fn(40, 2, |_, j| j as f64);
        let g = gram(&basis);
        let hyper = RieszHyper {
            c2: 1.0,
            ..RieszHyper::default()
        };
        // p = 2, c2 = 2 would be out of range; c2 = 1 gives Phi^{-1}(0.75) > 0,
        // so force zero through p = 1 instead.
        let b1 = basis.columns(0, 1).into_owned();
        let c1 = contrast.columns(0, 1).into_owned();
        let g1 = gram(&b1);
        let sub = SubDictionary { indices: vec![0] };
        let err = fit_penalized(
            &b1,
            &g1,
            Moment::Balancing { contrast: &c1 },
            &[0],
            &sub,
            &Penalty::Tuned(hyper),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
        let ok = fit_penalized(
            &basis,
            &g,
            Moment::Balancing {
                contrast: &contrast,
            },
            &[0],
            &SubDictionary {
                indices: vec![0, 1],
            },
            &Penalty::Tuned(hyper),
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn prediction_is_projection() {
        let dict = DictionarySpec {
            degree: 2,
            interactions: false,
            layout: Layout::MainInteraction,
            standardize: false,
        }
        .raw(1);
        let mut fit = RieszFit {
            rho: vec![0.0; 6],
            lambda_used: 0.1,
            d_norm: vec![0.0; 6],
            penalty_weights: vec![1.0; 6],
            tuning_iterations: 1,
            balance_sup_norm: 0.0,
            sparsity: 0,
            converged: true,
            kkt_violation: 0.0,
            init_fallback: false,
        };
        assert_eq!(predict_alpha(&fit, &dict, 1.0, &[0.5]).unwrap(), 0.0);
        fit.rho[4] = 1.0;
        assert_eq!(predict_alpha(&fit, &dict, 1.0, &[0.5]).unwrap(), 0.5);
        fit.rho = vec![0.3, -1.0, 2.0, 0.5, 0.25, -0.75];
        let x = [0.7];
        let lhs = predict_alpha(&fit, &dict, 1.0, &x).unwrap()
            - predict_alpha(&fit, &dict, 0.0, &x).unwrap();
        let contrast = dict.instrument_contrast(&x).unwrap();
        let rhs: f64 = contrast.iter().zip(&fit.rho).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-14);
        assert!(matches!(
            predict_alpha(&fit, &dict, 1.0, &[0.1, 0.2]),
            Err(Error::Shape(_))
        ));
    }
}
