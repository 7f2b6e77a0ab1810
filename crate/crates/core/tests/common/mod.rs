//! Reference routines shared by the integration and acceptance targets. They
//! are written independently of the library solvers.
#![allow(dead_code)]

use autodml_iv::moments::{build_v, psi, solve_theta, GammaAt, Observation, Target};
use autodml_iv::simlab::finite_support::{self, Atom};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Random positive definite `p x p` matrix `A'A/m + ridge I`.
pub fn random_gram(rng: &mut ChaCha8Rng, p: usize, ridge: f64) -> DMatrix<f64> {
    let a = uniform_matrix(rng, 2 * p, p);
    a.tr_mul(&a) / (2 * p) as f64 + DMatrix::identity(p, p) * ridge
}

fn largest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.max()
}

fn shrink(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `rho'G rho - 2 M'rho + 2 lambda sum w_j |rho_j|`.
pub fn quadratic_objective(
    g: &DMatrix<f64>,
    m: &DVector<f64>,
    lambda: f64,
    w: &[f64],
    rho: &DVector<f64>,
) -> f64 {
    let pen: f64 = rho.iter().zip(w).map(|(r, wj)| wj * r.abs()).sum();
    rho.dot(&(g * rho)) - 2.0 * m.dot(rho) + 2.0 * lambda * pen
}

/// Accelerated proximal gradient on the quadratic Lasso objective.
pub fn fista_quadratic(
    g: &DMatrix<f64>,
    m: &DVector<f64>,
    lambda: f64,
    w: &[f64],
    iters: usize,
) -> DVector<f64> {
    let p = m.len();
    let step = 1.0 / (2.0 * largest_eigenvalue(g));
    let mut x = DVector::zeros(p);
    let mut y = x.clone();
    let mut t: f64 = 1.0;
    for _ in 0..iters {
        let grad = (g * &y - m) * 2.0;
        let x_next = DVector::from_fn(p, |j, _| {
            shrink(y[j] - step * grad[j], step * 2.0 * lambda * w[j])
        });
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
        if (&x_next - &x).amax() < 1e-15 {
            return x_next;
        }
        x = x_next;
        t = t_next;
    }
    x
}

fn sigmoid(e: f64) -> f64 {
    if e >= 0.0 {
        1.0 / (1.0 + (-e).exp())
    } else {
        let a = e.exp();
        a / (1.0 + a)
    }
}

/// Mean logistic loss plus `lambda` times the L1 norm of all but the first coefficient.
pub fn logistic_objective(x: &DMatrix<f64>, z: &[f64], lambda: f64, beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    let loss: f64 = eta
        .iter()
        .zip(z)
        .map(|(&e, &zi)| {
            (if e > 0.0 {
                e + (-e).exp().ln_1p()
            } else {
                e.exp().ln_1p()
            }) - zi * e
        })
        .sum::<f64>();
    loss / z.len() as f64 + lambda * beta.iter().skip(1).map(|b| b.abs()).sum::<f64>()
}

/// Accelerated proximal gradient for the L1 logistic objective.
pub fn fista_logistic(x: &DMatrix<f64>, z: &[f64], lambda: f64, iters: usize) -> DVector<f64> {
    let n = x.nrows() as f64;
    let p = x.ncols();
    let step = 4.0 * n / largest_eigenvalue(&x.tr_mul(x));
    let mut b = DVector::zeros(p);
    let mut y = b.clone();
    let mut t: f64 = 1.0;
    for _ in 0..iters {
        let eta = x * &y;
        let r = DVector::from_iterator(z.len(), eta.iter().zip(z).map(|(&e, &zi)| sigmoid(e) - zi));
        let grad = x.tr_mul(&r) / n;
        let b_next = DVector::from_fn(p, |j, _| {
            let v = y[j] - step * grad[j];
            if j == 0 {
                v
            } else {
                shrink(v, step * lambda)
            }
        });
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &b_next + (&b_next - &b) * ((t - 1.0) / t_next);
        if (&b_next - &b).amax() < 1e-15 {
            return b_next;
        }
        b = b_next;
        t = t_next;
    }
    b
}

/// Composite Simpson rule with `panels` (even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let mut s = f(a) + f(b);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Standard normal CDF: Taylor series of the integral for |x| < 2, the
/// Mills-ratio continued fraction (evaluated backwards) beyond.
pub fn normal_cdf(x: f64) -> f64 {
    let root_two_pi = (2.0 * std::f64::consts::PI).sqrt();
    if x.abs() < 2.0 {
        let mut term = x;
        let mut sum = x;
        let mut k = 0.0;
        while term.abs() > 1e-18 {
            k += 1.0;
            term *= -x * x / (2.0 * k);
            sum += term / (2.0 * k + 1.0);
        }
        0.5 + sum / root_two_pi
    } else {
        let t = x.abs();
        let mut frac = t;
        for k in (1..=5000).rev() {
            frac = t + f64::from(k) / frac;
        }
        let tail = (-0.5 * t * t).exp() / root_two_pi / frac;
        if x > 0.0 {
            1.0 - tail
        } else {
            tail
        }
    }
}

pub fn observation(a: &Atom) -> ([f64; 1], f64, f64, f64) {
    ([a.x], a.y, a.d, a.z)
}

/// `E[V | z, x]` under the finite-support law, one entry per component.
pub fn true_regression(target: &Target, z: f64, x: f64) -> Vec<f64> {
    let width = target.v_width();
    (0..width)
        .map(|c| {
            finite_support::conditional(z, x, |a| {
                let xs = [a.x];
                let obs = Observation {
                    y: a.y,
                    d: a.d,
                    z: a.z,
                    x: &xs,
                };
                build_v(target, &obs, None).unwrap()[c]
            })
        })
        .collect()
}

/// Population value of `E[psi]` with the given regression and weight functions.
pub fn population_moment(
    target: &Target,
    theta: &[f64],
    gamma: &dyn Fn(f64, f64) -> Vec<f64>,
    alpha: &dyn Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let mut acc = vec![0.0; theta.len()];
    for a in finite_support::atoms() {
        let xs = [a.x];
        let obs = Observation {
            y: a.y,
            d: a.d,
            z: a.z,
            x: &xs,
        };
        let v = build_v(target, &obs, None).unwrap();
        let (g1, g0, gz) = (gamma(1.0, a.x), gamma(0.0, a.x), gamma(a.z, a.x));
        let at = GammaAt {
            at_one: &g1,
            at_zero: &g0,
            at_observed: &gz,
        };
        let p = psi(&v, &at, alpha(a.z, a.x), theta).unwrap();
        for (s, v) in acc.iter_mut().zip(p) {
            *s += a.prob * v;
        }
    }
    acc
}

/// Population parameter `E[contrast of V_j] / E[contrast of D]`.
pub fn population_theta(target: &Target) -> Vec<f64> {
    let width = target.v_width();
    let mut eta = vec![0.0; width];
    for x in [0.0, 1.0] {
        let (g1, g0) = (
            true_regression(target, 1.0, x),
            true_regression(target, 0.0, x),
        );
        for c in 0..width {
            eta[c] += 0.5 * (g1[c] - g0[c]);
        }
    }
    solve_theta(&eta, target).unwrap()
}
