//! Comparison estimators built on an estimated instrument propensity:
//! inverse-propensity weights (with trimming or censoring) and complier
//! kappa-weights.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::crossfit::{
    cross_fit_estimate, to_rows, Diagnostics, EstimateReport, EstimatorConfig, Method,
};
use crate::dataset::IvDataset;
use crate::dictionary::{Dictionary, DictionarySpec};
use crate::error::{Error, Result};
use crate::moments::{Observation, Target};
use crate::optim::{fit_l1_logistic, LogisticFit};

/// What to do with estimated propensities close to 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrimMode {
    #[default]
    None,
    Trim,
    Censor,
}

impl std::str::FromStr for TrimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TrimMode::None),
            "trim" => Ok(TrimMode::Trim),
            "censor" => Ok(TrimMode::Censor),
            other => Err(Error::Config(format!(
                "unknown trim mode '{other}' (expected none, trim or censor)"
            ))),
        }
    }
}

impl std::fmt::Display for TrimMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrimMode::None => "none",
            TrimMode::Trim => "trim",
            TrimMode::Censor => "censor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimPolicy {
    pub mode: TrimMode,
    pub epsilon: f64,
}

impl Default for TrimPolicy {
    fn default() -> Self {
        TrimPolicy {
            mode: TrimMode::None,
            epsilon: 1e-12,
        }
    }
}

impl TrimPolicy {
    pub fn new(mode: TrimMode, epsilon: f64) -> Result<Self> {
        let policy = TrimPolicy { mode, epsilon };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "trim epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// `z / pi - (1 - z) / (1 - pi)`, or `None` when trimming drops the row.
pub fn plugin_alpha(pi_hat: f64, z: f64, policy: &TrimPolicy) -> Option<f64> {
    let eps = policy.epsilon;
    let pi = match policy.mode {
        TrimMode::None => pi_hat,
        TrimMode::Censor => pi_hat.clamp(eps, 1.0 - eps),
        TrimMode::Trim => {
            if pi_hat < eps || pi_hat > 1.0 - eps {
                return None;
            }
            pi_hat
        }
    };
    Some(z / pi - (1.0 - z) / (1.0 - pi))
}

/// Complier weights at one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaWeights {
    /// Weight for untreated-outcome functionals.
    pub untreated: f64,
    /// Weight for treated-outcome functionals.
    pub treated: f64,
    /// Weight for covariate functionals.
    pub overall: f64,
}

/// Kappa-weights in their direct form.
pub fn kappa_weights(d: f64, z: f64, pi: f64) -> KappaWeights {
    KappaWeights {
        untreated: (1.0 - d) * ((1.0 - z) - (1.0 - pi)) / ((1.0 - pi) * pi),
        treated: d * (z - pi) / ((1.0 - pi) * pi),
        overall: 1.0 - d * (1.0 - z) / (1.0 - pi) - (1.0 - d) * z / pi,
    }
}

/// Kappa-weights written through the inverse-propensity weight `alpha`.
pub fn kappa_weights_via_alpha(d: f64, z: f64, pi: f64) -> KappaWeights {
    let alpha = z / pi - (1.0 - z) / (1.0 - pi);
    KappaWeights {
        untreated: alpha * (d - 1.0),
        treated: alpha * d,
        overall: alpha * (d - 1.0 + pi),
    }
}

/// A kappa-weighted estimate with an influence approximation that treats
/// the propensities as known.
#[derive(Debug, Clone)]
pub struct KappaEstimate {
    pub theta: Vec<f64>,
    /// One row per observation.
    pub influence: Vec<Vec<f64>>,
}

struct Ratio {
    num: f64,
    den: f64,
}

fn weighted_ratio(w: &[f64], g: &[f64]) -> Result<Ratio> {
    let den: f64 = w.iter().sum();
    let num: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
    if den == 0.0 || !den.is_finite() {
        return Err(Error::DegenerateWeights(format!("weight sum is {den}")));
    }
    Ok(Ratio { num, den })
}

/// Self-normalized kappa-weighted estimates for `target`.
///
/// LATE is `sum k1 y / sum k1 - sum k0 y / sum k0`, characteristics use the
/// treated weights and the distribution grid uses the untreated weights for
/// the `beta` block and the treated weights for the `delta` block.
pub fn kappa_estimate(
    data: &IvDataset,
    pi_hat: &[f64],
    target: &Target,
    dict: Option<&Dictionary>,
) -> Result<KappaEstimate> {
    let n = data.n();
    if pi_hat.len() != n {
        return Err(Error::Shape(format!(
            "{} propensities for {n} rows",
            pi_hat.len()
        )));
    }
    if let Some(bad) = pi_hat.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Config(format!(
            "kappa weights need propensities in (0, 1), found {bad}"
        )));
    }
    let weights: Vec<KappaWeights> = (0..n)
        .map(|i| kappa_weights_via_alpha(data.d()[i], data.z()[i], pi_hat[i]))
        .collect();
    let k0: Vec<f64> = weights.iter().map(|w| w.untreated).collect();
    let k1: Vec<f64> = weights.iter().map(|w| w.treated).collect();
    let nf = n as f64;

    // (weights, g) pairs; each coordinate is sign * num/den summed over its terms.
    let mut coords: Vec<Vec<(f64, &[f64], Vec<f64>)>> = Vec::new();
    match target {
        Target::Late => {
            let y = data.y().to_vec();
            coords.push(vec![
                (1.0, k1.as_slice(), y.clone()),
                (-1.0, k0.as_slice(), y),
            ]);
        }
        Target::Characteristics { .. } => {
            let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); target.theta_dim()];
            for i in 0..n {
                // d = 1 exposes d * f(x) = f(x).
                let obs = Observation {
                    y: data.y()[i],
                    d: 1.0,
                    z: data.z()[i],
                    x: data.x_row(i),
                };
                let v = crate::moments::build_v(target, &obs, dict)?;
                for (c, col) in cols.iter_mut().enumerate() {
                    col.push(v[c]);
                }
            }
            for col in cols {
                coords.push(vec![(1.0, k1.as_slice(), col)]);
            }
        }
        Target::CounterfactualCdf { grid } => {
            for w in [&k0, &k1] {
                for &g in grid {
                    let ind: Vec<f64> = data
                        .y()
                        .iter()
                        .map(|&y| if y <= g { 1.0 } else { 0.0 })
                        .collect();
                    coords.push(vec![(1.0, w.as_slice(), ind)]);
                }
            }
        }
    }

    let mut theta = Vec::with_capacity(coords.len());
    let mut influence = vec![vec![0.0; coords.len()]; n];
    for (c, terms) in coords.iter().enumerate() {
        let mut value = 0.0;
        for (sign, w, g) in terms {
            let r = weighted_ratio(w, g)?;
            let mu = r.num / r.den;
            value += sign * mu;
            let mean_w = r.den / nf;
            for i in 0..n {
                influence[i][c] += sign * w[i] * (g[i] - mu) / mean_w;
            }
        }
        theta.push(value);
    }
    Ok(KappaEstimate { theta, influence })
}

/// Design matrix `q(x_i)` (first column is the intercept).
pub fn propensity_design(
    dict: &Dictionary,
    data: &IvDataset,
    rows: &[usize],
) -> Result<DMatrix<f64>> {
    let w = dict.q_width();
    let mut out = DMatrix::zeros(rows.len(), w);
    let mut buf = vec![0.0; w];
    for (r, &i) in rows.iter().enumerate() {
        dict.q_into(data.x_row(i), &mut buf)?;
        for j in 0..w {
            out[(r, j)] = buf[j];
        }
    }
    Ok(out)
}

/// Propensity model for `P(Z = 1 | X)` on `q(x)`.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub fit: LogisticFit,
    pub lambda: f64,
}

impl PropensityFit {
    pub fn estimate(
        data: &IvDataset,
        dict: &Dictionary,
        rows: &[usize],
        lambda: f64,
    ) -> Result<Self> {
        let design = propensity_design(dict, data, rows)?;
        let z: Vec<f64> = rows.iter().map(|&i| data.z()[i]).collect();
        Ok(PropensityFit {
            fit: fit_l1_logistic(&design, &z, lambda)?,
            lambda,
        })
    }

    pub fn predict(&self, dict: &Dictionary, x: &[f64]) -> Result<f64> {
        Ok(self.fit.predict(&dict.q(x)?))
    }

    pub fn sparsity(&self) -> usize {
        self.fit.coefficients.iter().filter(|c| **c != 0.0).count()
    }
}

/// Full-sample unpenalized logistic propensities, one per row.
pub fn full_sample_propensity(data: &IvDataset, spec: &DictionarySpec) -> Result<Vec<f64>> {
    let dict = spec.build(data);
    let rows: Vec<usize> = (0..data.n()).collect();
    let fit = PropensityFit::estimate(data, &dict, &rows, 0.0)?;
    (0..data.n())
        .map(|i| fit.predict(&dict, data.x_row(i)))
        .collect()
}

/// Plug-in DML: the cross-fitted pipeline with inverse-propensity weights.
pub fn fit_plugin_dml(
    data: &IvDataset,
    target: &Target,
    spec: &DictionarySpec,
    config: &EstimatorConfig,
) -> Result<EstimateReport> {
    let config = EstimatorConfig {
        method: Method::Plugin,
        ..config.clone()
    };
    cross_fit_estimate(data, target, spec, &config)
}

/// Kappa-weighting with one full-sample unpenalized logistic propensity.
/// The trim policy is applied to that propensity before weighting.
pub fn fit_kappa(
    data: &IvDataset,
    target: &Target,
    spec: &DictionarySpec,
    config: &EstimatorConfig,
) -> Result<EstimateReport> {
    config.trim.validate()?;
    let dict = spec.build(data);
    target.validate(data.k(), Some(&dict))?;
    let rows: Vec<usize> = (0..data.n()).collect();
    let fit = PropensityFit::estimate(data, &dict, &rows, 0.0)?;
    let pi: Vec<f64> = rows
        .iter()
        .map(|&i| fit.predict(&dict, data.x_row(i)))
        .collect::<Result<_>>()?;
    let eps = config.trim.epsilon;
    let keep: Vec<bool> = pi
        .iter()
        .map(|&p| config.trim.mode != TrimMode::Trim || (eps..=1.0 - eps).contains(&p))
        .collect();
    let retained: Vec<usize> = rows.iter().copied().filter(|&i| keep[i]).collect();
    if retained.is_empty() {
        return Err(Error::DegenerateWeights(
            "every observation was trimmed".into(),
        ));
    }
    let pi_used: Vec<f64> = retained
        .iter()
        .map(|&i| match config.trim.mode {
            TrimMode::Censor => pi[i].clamp(eps, 1.0 - eps),
            _ => pi[i],
        })
        .collect();
    if let Some(bad) = pi_used.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::DegenerateWeights(format!(
            "estimated propensity {bad} leaves no usable weight"
        )));
    }
    let sub = data.filter_rows(&keep)?;
    let est = kappa_estimate(&sub, &pi_used, target, Some(&dict))?;

    let d = est.theta.len();
    let n_used = retained.len();
    let mut omega = DMatrix::zeros(d, d);
    for phi in &est.influence {
        for a in 0..d {
            for b in 0..d {
                omega[(a, b)] += phi[a] * phi[b];
            }
        }
    }
    omega /= n_used as f64;
    let se = (0..d)
        .map(|j| (omega[(j, j)] / n_used as f64).sqrt())
        .collect();
    Ok(EstimateReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        method: Method::Kappa,
        target: target.clone(),
        labels: target.labels(),
        grid: target.grid().map(|g| g.to_vec()),
        theta: est.theta,
        theta_raw: None,
        se,
        cov: to_rows(&omega),
        n: data.n(),
        n_used,
        n_dropped: data.n() - n_used,
        eta_mean: Vec::new(),
        jacobian: to_rows(&DMatrix::identity(d, d)),
        omega: to_rows(&omega),
        diagnostics: Diagnostics {
            folds: 0,
            unconverged_fits: usize::from(!fit.fit.converged),
            per_fold: Vec::new(),
        },
        band: None,
        wald: None,
        seed: config.seed,
        config: serde_json::json!({
            "estimator": config,
            "dictionary": spec,
        }),
        retained,
        influence: est.influence,
        eta: Vec::new(),
        partition: None,
        dictionary: Some(dict),
        nuisances: Vec::new(),
    })
}
