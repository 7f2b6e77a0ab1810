//! L1-penalized solvers: quadratic-form Lasso by cyclic coordinate descent,
//! least-squares Lasso, and L1-regularized logistic regression.
//!
//! The quadratic problem is
//!
//! ```text
//! minimize  rho' G rho - 2 rho' M + 2 lambda sum_j w_j |rho_j|
//! ```
//!
//! whose optimality conditions are, for every coordinate `j` with `G_jj > 0`,
//! `(G rho - M)_j + lambda w_j sign(rho_j) = 0` when `rho_j != 0` and
//! `|(G rho - M)_j| <= lambda w_j` otherwise.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `sign(v) * max(|v| - t, 0)`.
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    pub g: DMatrix<f64>,
    pub m: DVector<f64>,
    pub lambda: f64,
    pub penalty_weights: DVector<f64>,
    pub init: DVector<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl QuadraticProblem {
    /// Unit penalty weights, zero start, `tol = 1e-8`, 10 000 sweeps.
    pub fn new(g: DMatrix<f64>, m: DVector<f64>, lambda: f64) -> Self {
        let p = m.len();
        QuadraticProblem {
            g,
            m,
            lambda,
            penalty_weights: DVector::from_element(p, 1.0),
            init: DVector::zeros(p),
            tol: 1e-8,
            max_iter: 10_000,
        }
    }

    pub fn with_weights(mut self, weights: DVector<f64>) -> Self {
        self.penalty_weights = weights;
        self
    }

    pub fn with_init(mut self, init: DVector<f64>) -> Self {
        self.init = init;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// `rho' G rho - 2 rho' M + 2 lambda sum w_j |rho_j|`.
    pub fn objective(&self, rho: &DVector<f64>) -> f64 {
        let quad = rho.dot(&(&self.g * rho));
        let lin = rho.dot(&self.m);
        let pen: f64 = rho
            .iter()
            .zip(self.penalty_weights.iter())
            .map(|(r, w)| w * r.abs())
            .sum();
        quad - 2.0 * lin + 2.0 * self.lambda * pen
    }

    /// Sup-norm violation of the optimality conditions at `rho`, ignoring
    /// coordinates with `G_jj = 0`.
    pub fn kkt_violation(&self, rho: &DVector<f64>) -> f64 {
        let grad = &self.g * rho - &self.m;
        let mut worst: f64 = 0.0;
        for j in 0..self.dim() {
            if self.g[(j, j)] <= 0.0 {
                continue;
            }
            let bound = self.lambda * self.penalty_weights[j];
            let v = if rho[j] != 0.0 {
                (grad[j] + bound * rho[j].signum()).abs()
            } else {
                (grad[j].abs() - bound).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }

    fn validate(&self) -> Result<()> {
        let p = self.dim();
        if self.g.nrows() != p || self.g.ncols() != p {
            return Err(Error::Shape(format!(
                "G is {}x{}, M has length {p}",
                self.g.nrows(),
                self.g.ncols()
            )));
        }
        if self.penalty_weights.len() != p || self.init.len() != p {
            return Err(Error::Shape(format!(
                "penalty weights ({}) and init ({}) must have length {p}",
                self.penalty_weights.len(),
                self.init.len()
            )));
        }
        if self.g.iter().chain(self.m.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "G or M contains a non-finite value".into(),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "penalty level must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self
            .penalty_weights
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::Config(
                "penalty weights must be finite and >= 0".into(),
            ));
        }
        let scale = self.g.amax().max(1.0);
        for i in 0..p {
            if self.g[(i, i)] < 0.0 {
                return Err(Error::Config(format!(
                    "G has a negative diagonal entry at {i}"
                )));
            }
            for j in 0..i {
                if (self.g[(i, j)] - self.g[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Config(format!("G is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    pub solution: DVector<f64>,
    pub iterations: usize,
    pub kkt_violation: f64,
    pub converged: bool,
}

/// Cyclic coordinate descent with exact per-coordinate minimization.
///
/// Coordinates with `G_jj = 0` are held at zero. The loop stops once the
/// recomputed KKT violation is at most `tol`, or when a sweep leaves every
/// coordinate unchanged, or after `max_iter` sweeps.
pub fn solve_quadratic_lasso(problem: &QuadraticProblem) -> Result<SolverResult> {
    problem.validate()?;
    let p = problem.dim();
    let g = &problem.g;
    let mut rho = problem.init.clone();
    let frozen: Vec<bool> = (0..p).map(|j| g[(j, j)] <= 0.0).collect();
    for j in 0..p {
        if frozen[j] {
            rho[j] = 0.0;
        }
    }

    let mut kkt = problem.kkt_violation(&rho);
    if kkt <= problem.tol {
        return Ok(SolverResult {
            solution: rho,
            iterations: 0,
            kkt_violation: kkt,
            converged: true,
        });
    }

    #[cfg(debug_assertions)]
    let mut last_objective = problem.objective(&rho);

    let mut iterations = 0;
    while iterations < problem.max_iter {
        iterations += 1;
        // residual r = M - G rho, refreshed every sweep
        let mut resid = &problem.m - g * &rho;
        let mut moved = false;
        for j in 0..p {
            if frozen[j] {
                continue;
            }
            let gjj = g[(j, j)];
            let old = rho[j];
            let partial = resid[j] + gjj * old;
            let new = soft_threshold(partial, problem.lambda * problem.penalty_weights[j]) / gjj;
            let delta = new - old;
            if delta != 0.0 {
                moved = true;
                rho[j] = new;
                resid.axpy(-delta, &g.column(j), 1.0);
            }
        }

        #[cfg(debug_assertions)]
        {
            let obj = problem.objective(&rho);
            debug_assert!(
                obj <= last_objective + 1e-9 * last_objective.abs().max(1.0),
                "objective increased: {last_objective} -> {obj}"
            );
            last_objective = obj;
        }

        kkt = problem.kkt_violation(&rho);
        if kkt <= problem.tol || !moved {
            break;
        }
    }
    Ok(SolverResult {
        converged: kkt <= problem.tol,
        solution: rho,
        iterations,
        kkt_violation: kkt,
    })
}

/// `G = X'X / n`, `M = X'v / n`.
pub fn least_squares_moments(
    x: &DMatrix<f64>,
    v: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if x.nrows() != v.len() {
        return Err(Error::Shape(format!(
            "design has {} rows, response has {}",
            x.nrows(),
            v.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Shape("empty design".into()));
    }
    let n = x.nrows() as f64;
    Ok((x.tr_mul(x) / n, x.tr_mul(v) / n))
}

/// Lasso regression minimizing `(1/n)|v - X beta|^2 + 2 lambda |beta|_1`
/// (the quadratic form with `G = X'X/n`, `M = X'v/n`).
pub fn fit_lasso_regression(
    x: &DMatrix<f64>,
    v: &DVector<f64>,
    lambda: f64,
) -> Result<SolverResult> {
    let (g, m) = least_squares_moments(x, v)?;
    solve_quadratic_lasso(&QuadraticProblem::new(g, m, lambda))
}

/// Settings for [`fit_l1_logistic_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticOptions {
    pub tol: f64,
    pub max_newton: usize,
    pub inner_max_sweeps: usize,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            tol: 1e-8,
            max_newton: 100,
            inner_max_sweeps: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coefficients: DVector<f64>,
    pub iterations: usize,
    pub kkt_violation: f64,
    pub converged: bool,
}

impl LogisticFit {
    /// Fitted probability for one design row.
    pub fn predict(&self, row: &[f64]) -> f64 {
        let eta: f64 = row
            .iter()
            .zip(self.coefficients.iter())
            .map(|(a, b)| a * b)
            .sum();
        sigmoid(eta)
    }
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Penalized negative log-likelihood
/// `(1/n) sum [log(1 + e^{eta_i}) - z_i eta_i] + lambda sum_{j >= 1} |beta_j|`.
pub fn logistic_objective(x: &DMatrix<f64>, z: &[f64], lambda: f64, beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    let n = z.len() as f64;
    let loss: f64 = eta
        .iter()
        .zip(z)
        .map(|(&e, &zi)| softplus(e) - zi * e)
        .sum::<f64>()
        / n;
    loss + lambda * beta.iter().skip(1).map(|b| b.abs()).sum::<f64>()
}

/// Sup-norm KKT violation; coordinate 0 is the unpenalized intercept.
pub fn logistic_kkt_violation(
    x: &DMatrix<f64>,
    z: &[f64],
    lambda: f64,
    beta: &DVector<f64>,
) -> f64 {
    let grad = logistic_gradient(x, z, beta);
    let mut worst = grad[0].abs();
    for j in 1..beta.len() {
        let v = if beta[j] != 0.0 {
            (grad[j] + lambda * beta[j].signum()).abs()
        } else {
            (grad[j].abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

fn logistic_gradient(x: &DMatrix<f64>, z: &[f64], beta: &DVector<f64>) -> DVector<f64> {
    let eta = x * beta;
    let resid = DVector::from_iterator(z.len(), eta.iter().zip(z).map(|(&e, &zi)| sigmoid(e) - zi));
    x.tr_mul(&resid) / z.len() as f64
}

/// L1-regularized logistic regression of a binary `z` on `x`, whose first
/// column must be the (unpenalized) intercept.
pub fn fit_l1_logistic(x: &DMatrix<f64>, z: &[f64], lambda: f64) -> Result<LogisticFit> {
    fit_l1_logistic_with(x, z, lambda, LogisticOptions::default())
}

/// Proximal Newton: each step minimizes the penalized quadratic model of the
/// log-likelihood by coordinate descent, followed by a backtracking line
/// search on the exact objective.
pub fn fit_l1_logistic_with(
    x: &DMatrix<f64>,
    z: &[f64],
    lambda: f64,
    options: LogisticOptions,
) -> Result<LogisticFit> {
    let n = x.nrows();
    let p = x.ncols();
    if z.len() != n {
        return Err(Error::Shape(format!(
            "design has {n} rows, labels have {}",
            z.len()
        )));
    }
    if n == 0 || p == 0 {
        return Err(Error::Shape("empty logistic design".into()));
    }
    if x.column(0).iter().any(|&v| v != 1.0) {
        return Err(Error::Config(
            "first design column must be the intercept (all ones)".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "logistic design contains a non-finite value".into(),
        ));
    }
    if let Some(bad) = z.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Config(format!(
            "logistic labels must be 0/1, found {bad}"
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "penalty level must be finite and >= 0, got {lambda}"
        )));
    }
    let mean = z.iter().sum::<f64>() / n as f64;
    if mean == 0.0 || mean == 1.0 {
        return Err(Error::DegenerateLabels { value: mean });
    }

    let nf = n as f64;
    let mut beta = DVector::zeros(p);
    beta[0] = (mean / (1.0 - mean)).ln();
    let mut weights = DVector::from_element(p, 1.0);
    weights[0] = 0.0;

    let mut objective = logistic_objective(x, z, lambda, &beta);
    let mut kkt = logistic_kkt_violation(x, z, lambda, &beta);
    let mut iterations = 0;
    while kkt > options.tol && iterations < options.max_newton {
        iterations += 1;
        let eta = x * &beta;
        let grad = logistic_gradient(x, z, &beta);
        // Hessian weights with probabilities kept inside [1e-10, 1 - 1e-10].
        let w: Vec<f64> = eta
            .iter()
            .map(|&e| {
                let pr = sigmoid(e).clamp(1e-10, 1.0 - 1e-10);
                pr * (1.0 - pr)
            })
            .collect();
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let row = x.row(i);
            let wi = w[i] / nf;
            for a in 0..p {
                let ra = row[a] * wi;
                if ra == 0.0 {
                    continue;
                }
                for b in a..p {
                    hess[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        // Quadratic model: 1/2 t'Ht - t'(H beta - grad) + lambda |t|_1 (same
        // minimizer as the solver's doubled form).
        let m = &hess * &beta - &grad;
        let model = QuadraticProblem::new(hess, m, lambda)
            .with_weights(weights.clone())
            .with_init(beta.clone())
            .with_tol((options.tol * 1e-2).max(1e-14))
            .with_max_iter(options.inner_max_sweeps);
        let target = solve_quadratic_lasso(&model)?.solution;
        let direction = &target - &beta;

        let l1 = |b: &DVector<f64>| b.iter().skip(1).map(|v| v.abs()).sum::<f64>();
        let decrease = grad.dot(&direction) + lambda * (l1(&target) - l1(&beta));
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-12 {
            let trial = &beta + &direction * step;
            let trial_obj = logistic_objective(x, z, lambda, &trial);
            if trial_obj <= objective + 1e-4 * step * decrease.min(0.0) {
                beta = trial;
                objective = trial_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        kkt = logistic_kkt_violation(x, z, lambda, &beta);
        if !accepted {
            break;
        }
    }
    Ok(LogisticFit {
        converged: kkt <= options.tol,
        coefficients: beta,
        iterations,
        kkt_violation: kkt,
    })
}
