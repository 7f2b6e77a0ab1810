//! Synthetic designs, the numerical truth for the step-propensity design,
//! and a Monte-Carlo harness summarizing estimator spread per grid point.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::TrimPolicy;
use crate::crossfit::{cross_fit_estimate, EstimatorConfig, Method};
use crate::dataset::IvDataset;
use crate::dictionary::DictionarySpec;
use crate::error::{Error, Result};
use crate::inference::band_for_report;
use crate::moments::Target;
use crate::stats::{normal_cdf, order_statistic};

/// Step-propensity design with a scalar uniform covariate:
/// `P(Z = 1 | x) = 0.05` for `x <= 0.5` and `0.95` otherwise,
/// `D ~ Bernoulli(z x)`, `Y ~ N(2 z x^2, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDesign {
    pub n: usize,
}

impl Default for StepDesign {
    fn default() -> Self {
        StepDesign { n: 1000 }
    }
}

impl StepDesign {
    pub fn propensity(x: f64) -> f64 {
        if x <= 0.5 {
            0.05
        } else {
            0.95
        }
    }

    pub fn outcome_mean(z: f64, x: f64) -> f64 {
        2.0 * z * x * x
    }

    pub fn treatment_prob(z: f64, x: f64) -> f64 {
        z * x
    }

    /// Draws `x`, then `z`, `d` and `y` for each row in turn.
    pub fn generate(&self, seed: u64) -> Result<IvDataset> {
        if self.n < 10 {
            return Err(Error::Config(format!(
                "design needs n >= 10, got {}",
                self.n
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.n;
        let (mut y, mut d, mut z, mut x) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for _ in 0..n {
            let xi: f64 = rng.random();
            let zi = f64::from(u8::from(rng.random::<f64>() < Self::propensity(xi)));
            let di = f64::from(u8::from(rng.random::<f64>() < Self::treatment_prob(zi, xi)));
            let eps: f64 = StandardNormal.sample(&mut rng);
            x.push(xi);
            z.push(zi);
            d.push(di);
            y.push(Self::outcome_mean(zi, xi) + eps);
        }
        IvDataset::new(y, d, z, x, 1)
    }
}

/// Default grid for the untreated distribution.
pub fn beta_grid() -> Vec<f64> {
    (-3..=4).map(f64::from).collect()
}

/// Default grid for the treated distribution.
pub fn delta_grid() -> Vec<f64> {
    (-2..=5).map(f64::from).collect()
}

// Gauss-Kronrod 7/15 nodes on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let pair = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss-Kronrod integration with absolute tolerance `tol`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
        let (value, err) = gk15(f, a, b);
        if err <= tol || depth >= 40 {
            return value;
        }
        let m = 0.5 * (a + b);
        recurse(f, a, m, 0.5 * tol, depth + 1) + recurse(f, m, b, 0.5 * tol, depth + 1)
    }
    recurse(f, a, b, tol, 0)
}

/// True complier distributions `(untreated, treated)` at each grid point.
pub fn truth_oracle(grid: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::Config("truth grid has a non-finite point".into()));
    }
    // Complier mass is E[X] = 1/2.
    let mass = 0.5;
    let tol = 1e-9;
    let beta = grid
        .iter()
        .map(|&y| {
            let f = |x: f64| normal_cdf(y - 2.0 * x * x) * (x - 1.0) + normal_cdf(y);
            integrate(&f, 0.0, 1.0, tol) / mass
        })
        .collect();
    let delta = grid
        .iter()
        .map(|&y| {
            let f = |x: f64| normal_cdf(y - 2.0 * x * x) * x;
            integrate(&f, 0.0, 1.0, tol) / mass
        })
        .collect();
    Ok((beta, delta))
}

/// Two binary instruments acting on disjoint halves of the population.
///
/// Each unit listens to one instrument (chosen by a fair coin) and takes
/// treatment when that instrument is on and the unit is a complier. Under
/// the null both instruments share the complier law `P(C = 1 | x) = x`;
/// with `shifted` the second instrument's compliers follow `1 - x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoInstrumentDesign {
    pub n: usize,
    pub shifted: bool,
}

impl TwoInstrumentDesign {
    pub fn propensity(x: f64) -> f64 {
        0.3 + 0.4 * x
    }

    /// Returns the dataset (instrument = first) and the second instrument.
    pub fn generate(&self, seed: u64) -> Result<(IvDataset, Vec<f64>)> {
        if self.n < 10 {
            return Err(Error::Config(format!(
                "design needs n >= 10, got {}",
                self.n
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.n;
        let (mut y, mut d, mut z1, mut z2, mut x) = (vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..n {
            let xi: f64 = rng.random();
            let a = f64::from(u8::from(rng.random::<f64>() < Self::propensity(xi)));
            let b = f64::from(u8::from(rng.random::<f64>() < Self::propensity(xi)));
            let first = rng.random::<f64>() < 0.5;
            let c_prob = if first || !self.shifted { xi } else { 1.0 - xi };
            let complier = rng.random::<f64>() < c_prob;
            let on = if first { a } else { b };
            let di = f64::from(u8::from(complier && on == 1.0));
            let eps: f64 = StandardNormal.sample(&mut rng);
            x.push(xi);
            z1.push(a);
            z2.push(b);
            d.push(di);
            y.push(xi + di * (1.0 + xi) + eps);
        }
        Ok((IvDataset::new(y, d, z1, x, 1)?, z2))
    }
}

/// Exhaustively enumerable distribution on `(X, Z) in {0, 1}^2` with discrete
/// `D` and `Y`, used to check population identities exactly.
pub mod finite_support {
    use crate::baselines::kappa_weights_via_alpha;

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Atom {
        pub y: f64,
        pub d: f64,
        pub z: f64,
        pub x: f64,
        pub prob: f64,
    }

    pub const OUTCOMES: [f64; 3] = [-1.0, 0.5, 2.0];

    pub fn propensity(x: f64) -> f64 {
        if x == 0.0 {
            0.25
        } else {
            0.75
        }
    }

    /// `P(D = 1 | z, x)`; monotone in `z`.
    pub fn treatment_prob(z: f64, x: f64) -> f64 {
        match (z == 1.0, x == 1.0) {
            (false, false) => 0.1,
            (false, true) => 0.2,
            (true, false) => 0.6,
            (true, true) => 0.9,
        }
    }

    /// `P(Y = OUTCOMES[k] | d, z, x)`.
    pub fn outcome_probs(d: f64, z: f64, x: f64) -> [f64; 3] {
        let s = 0.1 * d + 0.05 * z + 0.15 * x;
        [0.5 - s, 0.3, 0.2 + s]
    }

    /// All atoms with positive probability.
    pub fn atoms() -> Vec<Atom> {
        let mut out = Vec::new();
        for x in [0.0, 1.0] {
            let px = 0.5;
            for z in [0.0, 1.0] {
                let pi = propensity(x);
                let pz = if z == 1.0 { pi } else { 1.0 - pi };
                for d in [0.0, 1.0] {
                    let q = treatment_prob(z, x);
                    let pd = if d == 1.0 { q } else { 1.0 - q };
                    for (k, &y) in OUTCOMES.iter().enumerate() {
                        let py = outcome_probs(d, z, x)[k];
                        out.push(Atom {
                            y,
                            d,
                            z,
                            x,
                            prob: px * pz * pd * py,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn expectation(f: impl Fn(&Atom) -> f64) -> f64 {
        atoms().iter().map(|a| a.prob * f(a)).sum()
    }

    /// `E[g(W) | Z = z, X = x]`.
    pub fn conditional(z: f64, x: f64, g: impl Fn(&Atom) -> f64) -> f64 {
        let all = atoms();
        let cell: Vec<&Atom> = all.iter().filter(|a| a.z == z && a.x == x).collect();
        let mass: f64 = cell.iter().map(|a| a.prob).sum();
        cell.iter().map(|a| a.prob * g(a)).sum::<f64>() / mass
    }

    /// The true balancing weight.
    pub fn alpha(z: f64, x: f64) -> f64 {
        let pi = propensity(x);
        z / pi - (1.0 - z) / (1.0 - pi)
    }

    /// Population instrument-contrast ratio `E[c(g)] / E[c(D)]` where
    /// `c(h) = E[h | 1, X] - E[h | 0, X]`.
    pub fn contrast_ratio(g: impl Fn(&Atom) -> f64 + Copy) -> f64 {
        let contrast = |h: &dyn Fn(&Atom) -> f64| {
            [0.0, 1.0]
                .iter()
                .map(|&x| 0.5 * (conditional(1.0, x, h) - conditional(0.0, x, h)))
                .sum::<f64>()
        };
        contrast(&g) / contrast(&|a: &Atom| a.d)
    }

    /// Population kappa-weighted mean `E[k g] / E[k]`, with `which` selecting
    /// the untreated (0), treated (1) or overall (2) weights.
    pub fn kappa_mean(which: usize, g: impl Fn(&Atom) -> f64) -> f64 {
        let weight = |a: &Atom| {
            let k = kappa_weights_via_alpha(a.d, a.z, propensity(a.x));
            [k.untreated, k.treated, k.overall][which]
        };
        expectation(|a| weight(a) * g(a)) / expectation(weight)
    }
}

/// Estimators compared in the Monte-Carlo harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum McMethod {
    Auto,
    Plugin { trim: TrimPolicy },
    Kappa { trim: TrimPolicy },
}

impl McMethod {
    pub fn label(&self) -> String {
        match self {
            McMethod::Auto => "auto".into(),
            McMethod::Plugin { trim } => format!("plugin-{}", trim.mode),
            McMethod::Kappa { trim } => format!("kappa-{}", trim.mode),
        }
    }

    fn config(&self, base: &EstimatorConfig) -> EstimatorConfig {
        let mut cfg = base.clone();
        match self {
            McMethod::Auto => cfg.method = Method::Auto,
            McMethod::Plugin { trim } => {
                cfg.method = Method::Plugin;
                cfg.trim = *trim;
            }
            McMethod::Kappa { trim } => {
                cfg.method = Method::Kappa;
                cfg.trim = *trim;
            }
        }
        cfg
    }
}

/// Joint-coverage settings for the treated-distribution band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageSpec {
    pub alpha: f64,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub reps: usize,
    pub n: usize,
    pub methods: Vec<McMethod>,
    pub beta_grid: Vec<f64>,
    pub delta_grid: Vec<f64>,
    pub folds: usize,
    pub lambda_multiplier: f64,
    /// Scales the plug-in propensity penalty on top of `lambda_multiplier`.
    pub propensity_lambda_multiplier: f64,
    pub seed: u64,
    pub dictionary: DictionarySpec,
    pub coverage: Option<CoverageSpec>,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            reps: 500,
            n: 1000,
            methods: vec![McMethod::Auto],
            beta_grid: beta_grid(),
            delta_grid: delta_grid(),
            folds: 5,
            lambda_multiplier: 1.0,
            propensity_lambda_multiplier: 1.0,
            seed: 0,
            dictionary: DictionarySpec::simulation_preset(),
            coverage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub parameter: String,
    pub y: f64,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
    pub failures: usize,
}

impl SummaryRow {
    pub fn width(&self) -> f64 {
        self.q90 - self.q10
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageResult {
    pub method: String,
    pub covered: usize,
    pub evaluated: usize,
    /// Replications whose band could not be formed.
    pub failures: usize,
    /// Grid points left out of some band because their estimated variance was zero.
    pub excluded_points: usize,
}

impl CoverageResult {
    pub fn frequency(&self) -> f64 {
        self.covered as f64 / self.evaluated as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub reps: usize,
    pub seed: u64,
    pub rows: Vec<SummaryRow>,
    pub coverage: Vec<CoverageResult>,
    /// First error message per method, if any replication failed.
    pub failure_examples: Vec<(String, String)>,
}

impl McSummary {
    pub fn row(&self, method: &str, parameter: &str, y: f64) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.parameter == parameter && r.y == y)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method",
            "parameter",
            "y",
            "median",
            "q10",
            "q90",
            "failures",
        ])
        .map_err(|e| Error::Config(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.parameter.clone(),
                r.y.to_string(),
                r.median.to_string(),
                r.q10.to_string(),
                r.q90.to_string(),
                r.failures.to_string(),
            ])
            .map_err(|e| Error::Config(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()?).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Seeds for replication `rep`: (data, folds, bootstrap).
pub fn replication_seeds(master: u64, rep: usize) -> (u64, u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(rep as u64);
    (rng.next_u64(), rng.next_u64(), rng.next_u64())
}

/// Sorted union of two grids.
pub fn union_grid(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = a.iter().chain(b).copied().collect();
    g.sort_by(|x, y| x.total_cmp(y));
    g.dedup();
    g
}

struct RepOutcome {
    /// Per method: beta block then delta block, or the error message.
    estimates: Vec<std::result::Result<Vec<f64>, String>>,
    /// Per method: (covered, excluded points) or a failure.
    coverage: Vec<Option<std::result::Result<(bool, usize), String>>>,
}

pub fn run_monte_carlo(config: &McConfig) -> Result<McSummary> {
    if config.reps < 2 {
        return Err(Error::Config(format!(
            "need at least 2 replications, got {}",
            config.reps
        )));
    }
    if config.methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    let grid = union_grid(&config.beta_grid, &config.delta_grid);
    let target = Target::CounterfactualCdf { grid: grid.clone() };
    target.validate(1, None)?;
    let g = grid.len();
    let pos = |v: f64| {
        grid.iter()
            .position(|&u| u == v)
            .expect("grid point in union")
    };
    let beta_idx: Vec<usize> = config.beta_grid.iter().map(|&v| pos(v)).collect();
    let delta_idx: Vec<usize> = config.delta_grid.iter().map(|&v| g + pos(v)).collect();
    let truth_delta = truth_oracle(&config.delta_grid)?.1;
    let base = EstimatorConfig {
        folds: config.folds,
        propensity_lambda_multiplier: config.propensity_lambda_multiplier,
        ..EstimatorConfig::default()
    }
    .with_lambda_multiplier(config.lambda_multiplier);
    base.validate()?;
    let design = StepDesign { n: config.n };

    let outcomes: Vec<RepOutcome> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let (data_seed, fold_seed, band_seed) = replication_seeds(config.seed, rep);
            let data = match design.generate(data_seed) {
                Ok(d) => d,
                Err(e) => {
                    let msg = e.to_string();
                    return RepOutcome {
                        estimates: config.methods.iter().map(|_| Err(msg.clone())).collect(),
                        coverage: config.methods.iter().map(|_| None).collect(),
                    };
                }
            };
            let mut estimates = Vec::new();
            let mut coverage = Vec::new();
            for m in &config.methods {
                let mut cfg = m.config(&base);
                cfg.seed = fold_seed;
                match cross_fit_estimate(&data, &target, &config.dictionary, &cfg) {
                    Ok(report) => {
                        let picked: Vec<f64> = beta_idx
                            .iter()
                            .chain(&delta_idx)
                            .map(|&j| report.theta[j])
                            .collect();
                        estimates.push(Ok(picked));
                        coverage.push(config.coverage.map(|spec| {
                            let usable: Vec<usize> = delta_idx
                                .iter()
                                .copied()
                                .filter(|&j| report.cov[j][j] > 0.0)
                                .collect();
                            let excluded = delta_idx.len() - usable.len();
                            let truth: Vec<f64> = delta_idx
                                .iter()
                                .zip(&truth_delta)
                                .filter(|(j, _)| usable.contains(j))
                                .map(|(_, t)| *t)
                                .collect();
                            band_for_report(
                                &report,
                                Some(&usable),
                                spec.alpha,
                                spec.draws,
                                band_seed,
                            )
                            .map(|band| (band.covers(&truth), excluded))
                            .map_err(|e| e.to_string())
                        }));
                    }
                    Err(e) => {
                        estimates.push(Err(e.to_string()));
                        coverage.push(None);
                    }
                }
            }
            RepOutcome {
                estimates,
                coverage,
            }
        })
        .collect();

    let mut rows = Vec::new();
    let mut coverage = Vec::new();
    let mut failure_examples = Vec::new();
    let labels: Vec<(String, f64)> = config
        .beta_grid
        .iter()
        .map(|&y| ("beta".to_string(), y))
        .chain(config.delta_grid.iter().map(|&y| ("delta".to_string(), y)))
        .collect();
    for (mi, m) in config.methods.iter().enumerate() {
        let ok: Vec<&Vec<f64>> = outcomes
            .iter()
            .filter_map(|o| o.estimates[mi].as_ref().ok())
            .collect();
        let failures = config.reps - ok.len();
        if let Some(Err(msg)) = outcomes
            .iter()
            .map(|o| &o.estimates[mi])
            .find(|e| e.is_err())
        {
            failure_examples.push((m.label(), msg.clone()));
        }
        for (c, (param, y)) in labels.iter().enumerate() {
            let (median, q10, q90) = if ok.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                let mut vals: Vec<f64> = ok.iter().map(|v| v[c]).collect();
                vals.sort_by(|a, b| a.total_cmp(b));
                (
                    order_statistic(&vals, 0.5),
                    order_statistic(&vals, 0.1),
                    order_statistic(&vals, 0.9),
                )
            };
            rows.push(SummaryRow {
                method: m.label(),
                parameter: param.clone(),
                y: *y,
                median,
                q10,
                q90,
                failures,
            });
        }
        if config.coverage.is_some() {
            let mut res = CoverageResult {
                method: m.label(),
                covered: 0,
                evaluated: 0,
                failures: 0,
                excluded_points: 0,
            };
            for o in &outcomes {
                match &o.coverage[mi] {
                    Some(Ok((hit, excluded))) => {
                        res.evaluated += 1;
                        res.covered += usize::from(*hit);
                        res.excluded_points += excluded;
                    }
                    _ => res.failures += 1,
                }
            }
            coverage.push(res);
        }
    }
    Ok(McSummary {
        reps: config.reps,
        seed: config.seed,
        rows,
        coverage,
        failure_examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_limits() {
        let (b, d) = truth_oracle(&[-8.0, 8.0]).unwrap();
        assert!(b[0].abs() < 1e-6 && d[0].abs() < 1e-6);
        assert!((b[1] - 1.0).abs() < 1e-6 && (d[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gauss_kronrod_polynomials_exact() {
        let v = integrate(&|x: f64| x.powi(6) - 3.0 * x * x, 0.0, 1.0, 1e-12);
        assert!((v - (1.0 / 7.0 - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn design_shape() {
        let data = StepDesign { n: 500 }.generate(3).unwrap();
        assert_eq!(data.n(), 500);
        for i in 0..500 {
            if data.z()[i] == 0.0 {
                assert_eq!(data.d()[i], 0.0);
            }
        }
        assert_eq!(data, StepDesign { n: 500 }.generate(3).unwrap());
        assert!(StepDesign { n: 9 }.generate(1).is_err());
    }

    #[test]
    fn seeds_differ_by_stream() {
        assert_ne!(replication_seeds(1, 0), replication_seeds(1, 1));
        assert_eq!(replication_seeds(1, 7), replication_seeds(1, 7));
    }

    #[test]
    fn union_of_default_grids() {
        assert_eq!(
            union_grid(&beta_grid(), &delta_grid()),
            (-3..=5).map(f64::from).collect::<Vec<_>>()
        );
    }

    #[test]
    fn finite_support_is_a_distribution() {
        let total: f64 = finite_support::atoms().iter().map(|a| a.prob).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }
}
