//! Cross-fitted estimation: nuisances are trained on fold complements,
//! debiased scores are evaluated on the held-out fold, and the stacked
//! moment system is solved once on the pooled scores.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{plugin_alpha, PropensityFit, TrimPolicy};
use crate::dataset::{partition_folds, FoldPartition, IvDataset};
use crate::dictionary::{Dictionary, DictionarySpec, ExpandedBasis, SubDictionary};
use crate::error::{Error, Result};
use crate::inference::{BandResult, WaldTestResult};
use crate::moments::{self, GammaAt, Observation, Target};
use crate::riesz::{
    fit_penalized, gram, theoretical_lambda, Moment, Penalty, RieszFit, RieszHyper,
};
use crate::stats::isotonic;

pub const MAX_FOLDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Balancing weights learned directly from the dictionary.
    #[default]
    Auto,
    /// Inverse of a cross-fitted L1-logistic propensity.
    Plugin,
    /// Kappa-weighting with a full-sample logistic propensity.
    Kappa,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Method::Auto),
            "plugin" => Ok(Method::Plugin),
            "kappa" => Ok(Method::Kappa),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected auto, plugin or kappa)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Auto => "auto",
            Method::Plugin => "plugin",
            Method::Kappa => "kappa",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub method: Method,
    pub folds: usize,
    pub seed: u64,
    /// Penalty for the balancing weight.
    pub alpha_penalty: Penalty,
    /// Penalty for each outcome regression.
    pub gamma_penalty: Penalty,
    /// Propensity handling for the plug-in and kappa methods.
    pub trim: TrimPolicy,
    /// Scales the plug-in propensity penalty.
    pub propensity_lambda_multiplier: f64,
    /// Pool-adjacent-violators on each distribution block.
    pub monotone: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            method: Method::Auto,
            folds: 5,
            seed: 0,
            alpha_penalty: Penalty::default(),
            gamma_penalty: Penalty::default(),
            trim: TrimPolicy::default(),
            propensity_lambda_multiplier: 1.0,
            monotone: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 || self.folds > MAX_FOLDS {
            return Err(Error::Config(format!(
                "fold count must lie in [2, {MAX_FOLDS}], got {}",
                self.folds
            )));
        }
        for p in [&self.alpha_penalty, &self.gamma_penalty] {
            match p {
                Penalty::Tuned(h) => h.validate()?,
                Penalty::Fixed { lambda } => {
                    if !(*lambda >= 0.0 && lambda.is_finite()) {
                        return Err(Error::Config(format!(
                            "fixed penalty must be finite and >= 0, got {lambda}"
                        )));
                    }
                }
            }
        }
        self.trim.validate()?;
        if !(self.propensity_lambda_multiplier >= 0.0
            && self.propensity_lambda_multiplier.is_finite())
        {
            return Err(Error::Config(
                "propensity lambda multiplier must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Applies a common multiplier to both tuned penalties.
    pub fn with_lambda_multiplier(mut self, multiplier: f64) -> Self {
        for p in [&mut self.alpha_penalty, &mut self.gamma_penalty] {
            if let Penalty::Tuned(h) = p {
                h.lambda_multiplier = multiplier;
            }
        }
        self
    }
}

/// Training rows handed to a regression learner.
pub struct TrainingSet<'a> {
    pub data: &'a IvDataset,
    pub dictionary: &'a Dictionary,
    /// Dataset row indices.
    pub rows: &'a [usize],
    /// `b(Z_i, X_i)` for the training rows.
    pub basis: &'a DMatrix<f64>,
    /// `basis' basis / rows`.
    pub gram: &'a DMatrix<f64>,
    /// One column per component of `V`.
    pub responses: &'a DMatrix<f64>,
}

/// Diagnostics of one fitted regression component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionDiagnostics {
    pub lambda: f64,
    pub max_penalty_weight: f64,
    pub sparsity: usize,
    pub converged: bool,
    pub kkt_violation: f64,
}

/// A fitted `gamma(z, x) = E[V | Z = z, X = x]`.
pub trait FittedRegression: Send + Sync + Debug {
    /// Predicts every component of `V` at `(z, x)`; `basis_row` is `b(z, x)`.
    fn predict(&self, z: f64, x: &[f64], basis_row: &[f64]) -> Vec<f64>;

    fn diagnostics(&self) -> Vec<RegressionDiagnostics> {
        Vec::new()
    }
}

/// Fits `gamma` on a fold complement.
pub trait RegressionLearner: Sync {
    fn fit(&self, training: &TrainingSet<'_>) -> Result<Arc<dyn FittedRegression>>;
}

/// Penalized least squares on the shared dictionary, tuned per component.
#[derive(Debug, Clone)]
pub struct LassoLearner {
    pub penalty: Penalty,
}

#[derive(Debug)]
pub struct LinearFit {
    /// One coefficient vector per component.
    pub coefficients: Vec<Vec<f64>>,
    pub fits: Vec<RieszFit>,
}

impl FittedRegression for LinearFit {
    fn predict(&self, _z: f64, _x: &[f64], basis_row: &[f64]) -> Vec<f64> {
        self.coefficients
            .iter()
            .map(|c| c.iter().zip(basis_row).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn diagnostics(&self) -> Vec<RegressionDiagnostics> {
        self.fits
            .iter()
            .map(|f| RegressionDiagnostics {
                lambda: f.lambda_used,
                max_penalty_weight: f.max_penalty_weight(),
                sparsity: f.sparsity,
                converged: f.converged,
                kkt_violation: f.kkt_violation,
            })
            .collect()
    }
}

impl RegressionLearner for LassoLearner {
    fn fit(&self, t: &TrainingSet<'_>) -> Result<Arc<dyn FittedRegression>> {
        let intercepts = t.dictionary.intercepts();
        let sub: SubDictionary = t.dictionary.sub_dictionary();
        let fits = (0..t.responses.ncols())
            .into_par_iter()
            .map(|c| {
                let response: DVector<f64> = t.responses.column(c).into_owned();
                fit_penalized(
                    t.basis,
                    t.gram,
                    Moment::Regression {
                        response: &response,
                    },
                    &intercepts,
                    &sub,
                    &self.penalty,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Arc::new(LinearFit {
            coefficients: fits.iter().map(|f| f.rho.clone()).collect(),
            fits,
        }))
    }
}

/// The weight model of one fold.
#[derive(Debug, Clone)]
pub enum AlphaModel {
    Riesz(RieszFit),
    Propensity(PropensityFit),
}

/// Nuisances trained on one fold complement.
#[derive(Debug, Clone)]
pub struct FoldNuisance {
    pub alpha: AlphaModel,
    pub gamma: Arc<dyn FittedRegression>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_dropped: usize,
    /// Penalty level of the weight model (balancing weight or propensity).
    pub lambda: f64,
    pub max_penalty_weight: f64,
    /// Nonzero coefficients of the weight model.
    pub sparsity: usize,
    /// `|mean (b(1,x) - b(0,x)) - mean alpha b|_inf` on the training rows.
    pub balance_sup_norm: f64,
    pub tuning_iterations: usize,
    pub converged: bool,
    pub kkt_violation: f64,
    pub init_fallback: bool,
    /// Held-out mean of the treatment component of the debiased score.
    pub first_stage: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub propensity_range: Option<[f64; 2]>,
    pub regressions: Vec<RegressionDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub folds: usize,
    pub unconverged_fits: usize,
    pub per_fold: Vec<FoldDiagnostics>,
}

/// Everything produced by one estimation run.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub version: String,
    pub method: Method,
    pub target: Target,
    pub labels: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    pub theta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_raw: Option<Vec<f64>>,
    pub se: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub n: usize,
    pub n_used: usize,
    pub n_dropped: usize,
    pub eta_mean: Vec<f64>,
    pub jacobian: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band: Option<BandResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wald: Option<WaldTestResult>,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Dataset rows that entered the score average, ascending.
    #[serde(skip)]
    pub retained: Vec<usize>,
    /// `psi_i(theta_hat)` for each retained row.
    #[serde(skip)]
    pub influence: Vec<Vec<f64>>,
    /// `eta_i` for each retained row.
    #[serde(skip)]
    pub eta: Vec<Vec<f64>>,
    #[serde(skip)]
    pub partition: Option<FoldPartition>,
    #[serde(skip)]
    pub dictionary: Option<Dictionary>,
    #[serde(skip)]
    pub nuisances: Vec<FoldNuisance>,
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, |v| v.len());
    DMatrix::from_fn(r, c, |a, b| rows[a][b])
}

impl EstimateReport {
    pub fn cov_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.cov)
    }

    pub fn jacobian_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.jacobian)
    }

    pub fn omega_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.omega)
    }

    /// `J^{-1} psi_i` for each retained row.
    pub fn scaled_influence(&self) -> Result<Vec<Vec<f64>>> {
        let jinv = self
            .jacobian_matrix()
            .try_inverse()
            .ok_or(Error::SingularJacobian)?;
        Ok(self
            .influence
            .iter()
            .map(|psi| {
                (&jinv * DVector::from_column_slice(psi))
                    .iter()
                    .copied()
                    .collect()
            })
            .collect())
    }

    /// Selects coordinates of `theta` by label.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// `J = d/dtheta mean A(theta) eta = -mean(eta_D) I`; constant in `theta`.
pub fn jacobian(eta_mean: &[f64], target: &Target, _theta: &[f64]) -> Result<DMatrix<f64>> {
    let d = target.theta_dim();
    if eta_mean.len() != d + 1 {
        return Err(Error::Shape(format!(
            "mean eta has width {}, expected {}",
            eta_mean.len(),
            d + 1
        )));
    }
    Ok(DMatrix::from_diagonal_element(d, d, -eta_mean[d]))
}

/// Observation vectors `V_i`, one row per observation.
pub fn observation_vectors(
    data: &IvDataset,
    target: &Target,
    dict: &Dictionary,
) -> Result<DMatrix<f64>> {
    let j = target.v_width();
    let mut out = DMatrix::zeros(data.n(), j);
    for i in 0..data.n() {
        let obs = Observation {
            y: data.y()[i],
            d: data.d()[i],
            z: data.z()[i],
            x: data.x_row(i),
        };
        let v = moments::build_v(target, &obs, Some(dict))?;
        for c in 0..j {
            out[(i, c)] = v[c];
        }
    }
    Ok(out)
}

fn rows_matrix(rows: &[usize], p: usize, get: impl Fn(usize) -> Vec<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), p);
    for (r, &i) in rows.iter().enumerate() {
        let v = get(i);
        for c in 0..p {
            m[(r, c)] = v[c];
        }
    }
    m
}

struct Context<'a> {
    data: &'a IvDataset,
    target: &'a Target,
    dict: &'a Dictionary,
    basis: &'a ExpandedBasis,
    v: &'a DMatrix<f64>,
    partition: &'a FoldPartition,
    config: &'a EstimatorConfig,
    learner: &'a dyn RegressionLearner,
}

struct FoldOutput {
    members: Vec<usize>,
    eta: Vec<Option<Vec<f64>>>,
    diagnostics: FoldDiagnostics,
    nuisance: FoldNuisance,
}

fn alpha_penalty_constants(p: &Penalty) -> RieszHyper {
    match p {
        Penalty::Tuned(h) => *h,
        Penalty::Fixed { .. } => RieszHyper::default(),
    }
}

fn fit_fold(ctx: &Context<'_>, fold: usize) -> Result<FoldOutput> {
    let eb = ctx.basis;
    let p = eb.p;
    let train = ctx.partition.complement(fold);
    let members = ctx.partition.members(fold);
    let basis = rows_matrix(&train, p, |i| eb.observed_row(i).to_vec());
    let g = gram(&basis);
    let responses = rows_matrix(&train, ctx.v.ncols(), |i| {
        ctx.v.row(i).iter().copied().collect()
    });

    let (alpha_model, train_alpha): (AlphaModel, Vec<Option<f64>>) = match ctx.config.method {
        Method::Auto => {
            let contrast = rows_matrix(&train, p, |i| {
                eb.one_row(i)
                    .iter()
                    .zip(eb.zero_row(i))
                    .map(|(a, b)| a - b)
                    .collect()
            });
            let fit = fit_penalized(
                &basis,
                &g,
                Moment::Balancing {
                    contrast: &contrast,
                },
                &ctx.dict.intercepts(),
                &ctx.dict.sub_dictionary(),
                &ctx.config.alpha_penalty,
            )?;
            let a = train
                .iter()
                .map(|&i| Some(fit.predict_row(eb.observed_row(i))))
                .collect();
            (AlphaModel::Riesz(fit), a)
        }
        Method::Plugin => {
            let lambda = match ctx.config.alpha_penalty {
                Penalty::Fixed { lambda } => lambda,
                ref tuned => {
                    let h = alpha_penalty_constants(tuned);
                    theoretical_lambda(train.len(), ctx.dict.q_width(), h.c1, h.c2)?
                        * ctx.config.propensity_lambda_multiplier
                }
            };
            let fit = PropensityFit::estimate(ctx.data, ctx.dict, &train, lambda)?;
            let a = train
                .iter()
                .map(|&i| {
                    let pi = fit.fit.predict(eb.q_row(i));
                    plugin_alpha(pi, ctx.data.z()[i], &ctx.config.trim)
                })
                .collect();
            (AlphaModel::Propensity(fit), a)
        }
        Method::Kappa => {
            return Err(Error::Config(
                "kappa weighting is not a cross-fitted method".into(),
            ))
        }
    };

    let gamma = ctx.learner.fit(&TrainingSet {
        data: ctx.data,
        dictionary: ctx.dict,
        rows: &train,
        basis: &basis,
        gram: &g,
        responses: &responses,
    })?;

    // Sample balance of the weight model on its own training rows.
    let mut gap = vec![0.0; p];
    let mut kept = 0usize;
    for (r, &i) in train.iter().enumerate() {
        if let Some(a) = train_alpha[r] {
            kept += 1;
            let (b1, b0, b) = (eb.one_row(i), eb.zero_row(i), eb.observed_row(i));
            for c in 0..p {
                gap[c] += b1[c] - b0[c] - a * b[c];
            }
        }
    }
    let balance_sup_norm = if kept > 0 {
        gap.iter()
            .map(|v| (v / kept as f64).abs())
            .fold(0.0, f64::max)
    } else {
        f64::NAN
    };

    let mut eta = Vec::with_capacity(members.len());
    let mut pi_range = [f64::INFINITY, f64::NEG_INFINITY];
    for &i in &members {
        let x = ctx.data.x_row(i);
        let z = ctx.data.z()[i];
        let alpha = match &alpha_model {
            AlphaModel::Riesz(fit) => Some(fit.predict_row(eb.observed_row(i))),
            AlphaModel::Propensity(fit) => {
                let pi = fit.fit.predict(eb.q_row(i));
                pi_range[0] = pi_range[0].min(pi);
                pi_range[1] = pi_range[1].max(pi);
                plugin_alpha(pi, z, &ctx.config.trim)
            }
        };
        let Some(alpha) = alpha else {
            eta.push(None);
            continue;
        };
        let g1 = gamma.predict(1.0, x, eb.one_row(i));
        let g0 = gamma.predict(0.0, x, eb.zero_row(i));
        let gz = gamma.predict(z, x, eb.observed_row(i));
        let v: Vec<f64> = ctx.v.row(i).iter().copied().collect();
        let e = moments::eta(
            &v,
            &GammaAt {
                at_one: &g1,
                at_zero: &g0,
                at_observed: &gz,
            },
            alpha,
        )?;
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "debiased score of row {} is not finite",
                i + 1
            )));
        }
        eta.push(Some(e));
    }

    let d = ctx.target.theta_dim();
    let used: Vec<&Vec<f64>> = eta.iter().flatten().collect();
    let first_stage = if used.is_empty() {
        f64::NAN
    } else {
        used.iter().map(|e| e[d]).sum::<f64>() / used.len() as f64
    };
    let n_dropped = eta.iter().filter(|e| e.is_none()).count();

    let regressions = gamma.diagnostics();
    let diagnostics = match &alpha_model {
        AlphaModel::Riesz(fit) => FoldDiagnostics {
            fold,
            n_train: train.len(),
            n_eval: members.len(),
            n_dropped,
            lambda: fit.lambda_used,
            max_penalty_weight: fit.max_penalty_weight(),
            sparsity: fit.sparsity,
            balance_sup_norm,
            tuning_iterations: fit.tuning_iterations,
            converged: fit.converged,
            kkt_violation: fit.kkt_violation,
            init_fallback: fit.init_fallback,
            first_stage,
            propensity_range: None,
            regressions,
        },
        AlphaModel::Propensity(fit) => FoldDiagnostics {
            fold,
            n_train: train.len(),
            n_eval: members.len(),
            n_dropped,
            lambda: fit.lambda,
            max_penalty_weight: 1.0,
            sparsity: fit.sparsity(),
            balance_sup_norm,
            tuning_iterations: fit.fit.iterations,
            converged: fit.fit.converged,
            kkt_violation: fit.fit.kkt_violation,
            init_fallback: false,
            first_stage,
            propensity_range: Some(pi_range),
            regressions,
        },
    };
    Ok(FoldOutput {
        members,
        eta,
        diagnostics,
        nuisance: FoldNuisance {
            alpha: alpha_model,
            gamma,
        },
    })
}

/// Cross-fitted estimate with the default Lasso outcome regressions.
pub fn cross_fit_estimate(
    data: &IvDataset,
    target: &Target,
    spec: &DictionarySpec,
    config: &EstimatorConfig,
) -> Result<EstimateReport> {
    let learner = LassoLearner {
        penalty: config.gamma_penalty,
    };
    cross_fit_estimate_with(data, target, spec, config, &learner)
}

/// Cross-fitted estimate with a caller-supplied outcome regression.
pub fn cross_fit_estimate_with(
    data: &IvDataset,
    target: &Target,
    spec: &DictionarySpec,
    config: &EstimatorConfig,
    learner: &dyn RegressionLearner,
) -> Result<EstimateReport> {
    config.validate()?;
    if config.method == Method::Kappa {
        return crate::baselines::fit_kappa(data, target, spec, config);
    }
    let dict = spec.build(data);
    target.validate(data.k(), Some(&dict))?;
    let partition = partition_folds(data.n(), config.folds, config.seed)?;
    let basis = dict.expand_dataset(data)?;
    let v = observation_vectors(data, target, &dict)?;
    let ctx = Context {
        data,
        target,
        dict: &dict,
        basis: &basis,
        v: &v,
        partition: &partition,
        config,
        learner,
    };

    let outputs: Vec<FoldOutput> = (0..config.folds)
        .into_par_iter()
        .map(|f| fit_fold(&ctx, f).map_err(|e| e.in_fold(f)))
        .collect::<Result<Vec<_>>>()?;

    let n = data.n();
    let mut eta_rows: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut per_fold = Vec::with_capacity(outputs.len());
    let mut nuisances = Vec::with_capacity(outputs.len());
    for out in outputs {
        for (i, e) in out.members.into_iter().zip(out.eta) {
            eta_rows[i] = e;
        }
        per_fold.push(out.diagnostics);
        nuisances.push(out.nuisance);
    }

    let mut report = match assemble(target, &eta_rows, n, config) {
        Err(Error::WeakFirstStage { contrast, .. }) => {
            return Err(Error::WeakFirstStage {
                contrast,
                fold_contrasts: per_fold.iter().map(|f| f.first_stage).collect(),
            })
        }
        other => other?,
    };
    report.method = config.method;
    report.diagnostics = Diagnostics {
        folds: config.folds,
        unconverged_fits: per_fold
            .iter()
            .map(|f| {
                usize::from(!f.converged) + f.regressions.iter().filter(|r| !r.converged).count()
            })
            .sum(),
        per_fold,
    };
    report.config = serde_json::json!({
        "estimator": config,
        "dictionary": spec,
    });
    report.partition = Some(partition);
    report.dictionary = Some(dict);
    report.nuisances = nuisances;
    Ok(report)
}

/// Solves the pooled moment system and forms the sandwich covariance.
fn assemble(
    target: &Target,
    eta_rows: &[Option<Vec<f64>>],
    n: usize,
    config: &EstimatorConfig,
) -> Result<EstimateReport> {
    let d = target.theta_dim();
    let j = d + 1;
    let retained: Vec<usize> = (0..n).filter(|&i| eta_rows[i].is_some()).collect();
    let n_used = retained.len();
    if n_used == 0 {
        return Err(Error::DegenerateWeights(
            "every observation was trimmed".into(),
        ));
    }
    let mut eta_mean = vec![0.0; j];
    for &i in &retained {
        for (acc, v) in eta_mean.iter_mut().zip(eta_rows[i].as_ref().unwrap()) {
            *acc += v;
        }
    }
    for v in eta_mean.iter_mut() {
        *v /= n_used as f64;
    }
    let theta_root = moments::solve_theta(&eta_mean, target)?;
    let influence: Vec<Vec<f64>> = retained
        .iter()
        .map(|&i| moments::apply_a(eta_rows[i].as_ref().unwrap(), &theta_root))
        .collect();
    let mut omega = DMatrix::zeros(d, d);
    for psi in &influence {
        for a in 0..d {
            for b in a..d {
                omega[(a, b)] += psi[a] * psi[b];
            }
        }
    }
    omega /= n_used as f64;
    for a in 0..d {
        for b in 0..a {
            omega[(a, b)] = omega[(b, a)];
        }
    }
    let jac = jacobian(&eta_mean, target, &theta_root)?;
    let jd = eta_mean[d];
    if jd == 0.0 {
        return Err(Error::SingularJacobian);
    }
    // J = -eta_D I, so J^{-1} Omega J^{-1} = Omega / eta_D^2.
    let cov = &omega / (jd * jd);
    let se: Vec<f64> = (0..d)
        .map(|r| (cov[(r, r)] / n_used as f64).sqrt())
        .collect();

    let (theta, theta_raw) = match (config.monotone, target) {
        (true, Target::CounterfactualCdf { grid }) => {
            let g = grid.len();
            let mut t = isotonic(&theta_root[..g]);
            t.extend(isotonic(&theta_root[g..]));
            (t, Some(theta_root.clone()))
        }
        _ => (theta_root.clone(), None),
    };

    Ok(EstimateReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        method: config.method,
        target: target.clone(),
        labels: target.labels(),
        grid: target.grid().map(|g| g.to_vec()),
        theta,
        theta_raw,
        se,
        cov: to_rows(&cov),
        n,
        n_used,
        n_dropped: n - n_used,
        eta_mean,
        jacobian: to_rows(&jac),
        omega: to_rows(&omega),
        diagnostics: Diagnostics {
            folds: config.folds,
            unconverged_fits: 0,
            per_fold: Vec::new(),
        },
        band: None,
        wald: None,
        seed: config.seed,
        config: serde_json::Value::Null,
        eta: retained
            .iter()
            .map(|&i| eta_rows[i].clone().unwrap())
            .collect(),
        retained,
        influence,
        partition: None,
        dictionary: None,
        nuisances: Vec::new(),
    })
}

/// Fold-complement derivatives of the averaged score with respect to the
/// regression coefficients and the balancing-weight coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrthogonalityCheck {
    pub fold: usize,
    /// `|d/d beta mean psi|_inf`.
    pub gamma_direction: f64,
    /// `|d/d rho mean psi|_inf`.
    pub alpha_direction: f64,
    /// `(1 + |theta|_inf) * lambda_eff`, with `lambda_eff` the largest
    /// penalty level times loading among the fold's fits.
    pub bound: f64,
}

/// Evaluates both score derivatives at `theta` on each fold complement.
pub fn orthogonality_diagnostics(
    report: &EstimateReport,
    data: &IvDataset,
    theta: &[f64],
) -> Result<Vec<OrthogonalityCheck>> {
    let dict = report
        .dictionary
        .as_ref()
        .ok_or_else(|| Error::Config("report carries no dictionary".into()))?;
    let partition = report
        .partition
        .as_ref()
        .ok_or_else(|| Error::Config("report carries no fold partition".into()))?;
    let a = moments::a_matrix(&report.target, theta)?;
    let a_max = a.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let eb = dict.expand_dataset(data)?;
    let v = observation_vectors(data, &report.target, dict)?;
    let p = eb.p;
    let d = report.target.theta_dim();
    let theta_sup = theta.iter().map(|t| t.abs()).fold(0.0, f64::max);

    let mut checks = Vec::new();
    for (fold, nuisance) in report.nuisances.iter().enumerate() {
        let AlphaModel::Riesz(alpha_fit) = &nuisance.alpha else {
            return Err(Error::Config(
                "orthogonality diagnostics need a learned balancing weight".into(),
            ));
        };
        let train = partition.complement(fold);
        let nf = train.len() as f64;
        let mut u = vec![0.0; p];
        let mut w = DMatrix::<f64>::zeros(d, p);
        for &i in &train {
            let b = eb.observed_row(i);
            let alpha = alpha_fit.predict_row(b);
            let (b1, b0) = (eb.one_row(i), eb.zero_row(i));
            for c in 0..p {
                u[c] += b1[c] - b0[c] - alpha * b[c];
            }
            let x = data.x_row(i);
            let gz = nuisance.gamma.predict(data.z()[i], x, b);
            let resid: Vec<f64> = (0..=d).map(|c| v[(i, c)] - gz[c]).collect();
            let ar = moments::apply_a(&resid, theta);
            for r in 0..d {
                for c in 0..p {
                    w[(r, c)] += b[c] * ar[r];
                }
            }
        }
        let gamma_direction = a_max * u.iter().map(|x| (x / nf).abs()).fold(0.0, f64::max);
        let alpha_direction = w.iter().map(|x| (x / nf).abs()).fold(0.0, f64::max);
        let mut lambda_eff = alpha_fit.lambda_used * alpha_fit.max_penalty_weight();
        for r in nuisance.gamma.diagnostics() {
            lambda_eff = lambda_eff.max(r.lambda * r.max_penalty_weight);
        }
        checks.push(OrthogonalityCheck {
            fold,
            gamma_direction,
            alpha_direction,
            bound: (1.0 + theta_sup) * lambda_eff,
        });
    }
    Ok(checks)
}
