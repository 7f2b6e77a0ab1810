//! Command-line front end.
//!
//! Settings come from built-in defaults, then an optional flat `key = value`
//! file (`--config`), then command-line flags and `--set key=value` pairs.
//! Every key is listed in [`RunConfig::KEYS`]; anything else is rejected.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::baselines::{TrimMode, TrimPolicy};
use crate::crossfit::{cross_fit_estimate, EstimateReport, EstimatorConfig, Method};
use crate::dataset::{load_csv, read_header, ColumnSchema, IvDataset};
use crate::dictionary::{DictionarySpec, Layout};
use crate::error::{Error, Result};
use crate::inference::{band_for_report, instrument_equality_test, WaldTestResult};
use crate::moments::{Feature, Target};
use crate::riesz::{Penalty, RieszHyper};
use crate::simlab::{
    beta_grid, delta_grid, run_monte_carlo, truth_oracle, union_grid, McConfig, McMethod,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "autodml-iv",
    version,
    about = "Debiased estimation of complier parameters with a binary instrument"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-fitted estimate on a CSV dataset; writes a JSON report.
    Fit(Flags),
    /// Monte-Carlo study on the step-propensity design; writes a CSV summary.
    Simulate(Flags),
    /// Population distribution functions of the simulation design; writes CSV.
    Truth(Flags),
    /// Wald test that two instruments identify the same parameters; writes JSON.
    TestInstruments(Flags),
}

#[derive(Debug, Args, Default)]
pub struct Flags {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: Option<String>,
    /// Flat `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// late, chars or cdf.
    #[arg(long)]
    pub target: Option<String>,
    /// Comma-separated outcome values, or `default`.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    /// auto, plugin or kappa.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub folds: Option<String>,
    /// none, trim or censor.
    #[arg(long)]
    pub trim: Option<String>,
    #[arg(long)]
    pub epsilon: Option<String>,
    /// Band and test level.
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub bootstrap_draws: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Output file (standard output when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub threads: Option<String>,
    /// Column of the second instrument (test-instruments).
    #[arg(long)]
    pub instrument2: Option<String>,
    /// Simulation design (only `appendix-f`).
    #[arg(long)]
    pub design: Option<String>,
    #[arg(long)]
    pub reps: Option<String>,
    /// Simulation sample size.
    #[arg(long)]
    pub n: Option<String>,
    /// Simulation methods, e.g. `auto,plugin-none,plugin-trim,kappa-none`.
    #[arg(long)]
    pub methods: Option<String>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Resolved settings; serialized verbatim into reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: String,
    pub outcome: String,
    pub treatment: String,
    pub instrument: String,
    pub instrument2: String,
    /// Empty means every column not used as outcome, treatment or instrument.
    pub covariates: Vec<String>,
    pub target: String,
    /// Empty means the default grid.
    pub grid: Vec<f64>,
    /// Empty means every covariate.
    pub features: Vec<String>,
    pub degree: usize,
    pub interactions: bool,
    pub layout: Layout,
    pub standardize: bool,
    pub method: Method,
    pub folds: usize,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub ridge_on_norm: f64,
    pub lambda_multiplier: f64,
    pub propensity_lambda_multiplier: f64,
    pub trim: TrimMode,
    pub epsilon: f64,
    pub monotone: bool,
    pub band: bool,
    pub alpha: f64,
    pub bootstrap_draws: usize,
    pub seed: u64,
    pub design: String,
    pub reps: usize,
    pub n: usize,
    pub methods: Vec<String>,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hyper = RieszHyper::default();
        let trim = TrimPolicy::default();
        RunConfig {
            data: String::new(),
            outcome: "y".into(),
            treatment: "d".into(),
            instrument: "z".into(),
            instrument2: String::new(),
            covariates: Vec::new(),
            target: "late".into(),
            grid: Vec::new(),
            features: Vec::new(),
            degree: 4,
            interactions: true,
            layout: Layout::MainInteraction,
            standardize: true,
            method: Method::Auto,
            folds: 5,
            c1: hyper.c1,
            c2: hyper.c2,
            c3: hyper.c3,
            ridge_on_norm: hyper.ridge_on_norm,
            lambda_multiplier: hyper.lambda_multiplier,
            propensity_lambda_multiplier: 1.0,
            trim: trim.mode,
            epsilon: trim.epsilon,
            monotone: false,
            band: true,
            alpha: 0.05,
            bootstrap_draws: 10_000,
            seed: 0,
            design: "appendix-f".into(),
            reps: 500,
            n: 1000,
            methods: ["auto", "plugin-none", "plugin-trim", "kappa-none"]
                .map(String::from)
                .to_vec(),
            out: None,
            threads: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected true or false, got `{value}`"
        ))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_grid(value: &str) -> Result<Vec<f64>> {
    if value == "default" {
        return Ok(Vec::new());
    }
    parse_list(value)
        .iter()
        .map(|v| parse_num("grid", v))
        .collect()
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data",
        "outcome",
        "treatment",
        "instrument",
        "instrument2",
        "covariates",
        "target",
        "grid",
        "features",
        "degree",
        "interactions",
        "layout",
        "standardize",
        "method",
        "folds",
        "c1",
        "c2",
        "c3",
        "ridge_on_norm",
        "lambda_multiplier",
        "propensity_lambda_multiplier",
        "trim",
        "epsilon",
        "monotone",
        "band",
        "alpha",
        "bootstrap_draws",
        "seed",
        "design",
        "reps",
        "n",
        "methods",
        "out",
        "threads",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "data" => self.data = value.to_string(),
            "outcome" => self.outcome = value.to_string(),
            "treatment" => self.treatment = value.to_string(),
            "instrument" => self.instrument = value.to_string(),
            "instrument2" => self.instrument2 = value.to_string(),
            "covariates" => self.covariates = parse_list(value),
            "target" => {
                if !["late", "chars", "cdf"].contains(&value) {
                    return Err(Error::Config(format!(
                        "unknown target `{value}` (expected late, chars or cdf)"
                    )));
                }
                self.target = value.to_string();
            }
            "grid" => self.grid = parse_grid(value)?,
            "features" => self.features = parse_list(value),
            "degree" => self.degree = parse_num(key, value)?,
            "interactions" => self.interactions = parse_bool(key, value)?,
            "layout" => self.layout = value.parse()?,
            "standardize" => self.standardize = parse_bool(key, value)?,
            "method" => self.method = value.parse()?,
            "folds" => self.folds = parse_num(key, value)?,
            "c1" => self.c1 = parse_num(key, value)?,
            "c2" => self.c2 = parse_num(key, value)?,
            "c3" => self.c3 = parse_num(key, value)?,
            "ridge_on_norm" => self.ridge_on_norm = parse_num(key, value)?,
            "lambda_multiplier" => self.lambda_multiplier = parse_num(key, value)?,
            "propensity_lambda_multiplier" => {
                self.propensity_lambda_multiplier = parse_num(key, value)?
            }
            "trim" => self.trim = value.parse()?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "monotone" => self.monotone = parse_bool(key, value)?,
            "band" => self.band = parse_bool(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "bootstrap_draws" => self.bootstrap_draws = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "design" => self.design = value.to_string(),
            "reps" => self.reps = parse_num(key, value)?,
            "n" => self.n = parse_num(key, value)?,
            "methods" => self.methods = parse_list(value),
            "out" => self.out = (!value.is_empty()).then(|| PathBuf::from(value)),
            "threads" => self.threads = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat settings text: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected `key = value`", no + 1))
            })?;
            self.set(key.trim(), value).map_err(|e| {
                Error::Config(format!("config line {}: {}", no + 1, strip_prefix(&e)))
            })?;
        }
        Ok(())
    }

    pub fn from_flags(flags: &Flags) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &flags.config {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config `{}`: {e}", path.display()))
            })?;
            cfg.apply_text(&text)?;
        }
        let pairs = [
            ("data", &flags.data),
            ("target", &flags.target),
            ("grid", &flags.grid),
            ("method", &flags.method),
            ("folds", &flags.folds),
            ("trim", &flags.trim),
            ("epsilon", &flags.epsilon),
            ("alpha", &flags.alpha),
            ("bootstrap_draws", &flags.bootstrap_draws),
            ("seed", &flags.seed),
            ("threads", &flags.threads),
            ("instrument2", &flags.instrument2),
            ("design", &flags.design),
            ("reps", &flags.reps),
            ("n", &flags.n),
            ("methods", &flags.methods),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if let Some(out) = &flags.out {
            cfg.out = Some(out.clone());
        }
        for pair in &flags.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn dictionary_spec(&self) -> DictionarySpec {
        DictionarySpec {
            degree: self.degree,
            interactions: self.interactions,
            layout: self.layout,
            standardize: self.standardize,
        }
    }

    pub fn trim_policy(&self) -> Result<TrimPolicy> {
        TrimPolicy::new(self.trim, self.epsilon)
    }

    pub fn estimator_config(&self) -> Result<EstimatorConfig> {
        let hyper = RieszHyper {
            c1: self.c1,
            c2: self.c2,
            c3: self.c3,
            ridge_on_norm: self.ridge_on_norm,
            lambda_multiplier: self.lambda_multiplier,
            ..RieszHyper::default()
        };
        let cfg = EstimatorConfig {
            method: self.method,
            folds: self.folds,
            seed: self.seed,
            alpha_penalty: Penalty::Tuned(hyper),
            gamma_penalty: Penalty::Tuned(hyper),
            trim: self.trim_policy()?,
            propensity_lambda_multiplier: self.propensity_lambda_multiplier,
            monotone: self.monotone,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn data_path(&self) -> Result<&str> {
        if self.data.is_empty() {
            return Err(Error::Config(
                "no data file given (use --data or `data = ...`)".into(),
            ));
        }
        Ok(&self.data)
    }

    /// Schema for `instrument`, with covariates resolved against `header`.
    pub fn schema(&self, header: &[String], instrument: &str) -> Result<ColumnSchema> {
        let covariates = if self.covariates.is_empty() {
            let used = [
                &self.outcome,
                &self.treatment,
                &self.instrument,
                &self.instrument2,
            ];
            header
                .iter()
                .filter(|h| !used.contains(h))
                .cloned()
                .collect()
        } else {
            self.covariates.clone()
        };
        if covariates.is_empty() {
            return Err(Error::Config(
                "no covariate columns left after outcome, treatment and instrument".into(),
            ));
        }
        Ok(ColumnSchema::new(
            &self.outcome,
            &self.treatment,
            instrument,
            covariates,
        ))
    }

    pub fn target_for(&self, schema: &ColumnSchema) -> Result<Target> {
        match self.target.as_str() {
            "late" => Ok(Target::Late),
            "chars" => {
                let names = if self.features.is_empty() {
                    schema.covariates.clone()
                } else {
                    self.features.clone()
                };
                let features = names
                    .iter()
                    .map(|name| {
                        schema
                            .covariates
                            .iter()
                            .position(|c| c == name)
                            .map(Feature::Covariate)
                            .ok_or_else(|| {
                                Error::Config(format!("feature `{name}` is not a covariate"))
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Target::Characteristics { features })
            }
            "cdf" => {
                let grid = if self.grid.is_empty() {
                    union_grid(&beta_grid(), &delta_grid())
                } else {
                    self.grid.clone()
                };
                Ok(Target::CounterfactualCdf { grid })
            }
            other => Err(Error::Config(format!("unknown target `{other}`"))),
        }
    }

    pub fn mc_methods(&self) -> Result<Vec<McMethod>> {
        if self.methods.is_empty() {
            return Err(Error::Config("no simulation methods selected".into()));
        }
        self.methods
            .iter()
            .map(|label| {
                let (kind, mode) = label.split_once('-').unwrap_or((label.as_str(), "none"));
                let trim = TrimPolicy::new(mode.parse()?, self.epsilon)?;
                match kind {
                    "auto" if mode == "none" => Ok(McMethod::Auto),
                    "plugin" => Ok(McMethod::Plugin { trim }),
                    "kappa" => Ok(McMethod::Kappa { trim }),
                    _ => Err(Error::Config(format!(
                        "unknown simulation method `{label}`"
                    ))),
                }
            })
            .collect()
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Pretty JSON whose floats carry 17 significant digits.
struct FixedDigits(PrettyFormatter<'static>);

macro_rules! delegate {
    ($($name:ident),*) => {
        $(fn $name<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
            self.0.$name(w)
        })*
    };
}

impl Formatter for FixedDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        w.write_all(format_float(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(w, f64::from(value))
    }

    fn begin_array_value<W: ?Sized + Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn begin_object_key<W: ?Sized + Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    delegate!(
        begin_array,
        end_array,
        end_array_value,
        begin_object,
        end_object,
        begin_object_value,
        end_object_value
    );
}

/// `d.dddddddddddddddde[-]x`; exact zero stays `0.0`.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0.0".into()
        } else {
            "0.0".into()
        };
    }
    format!("{v:.16e}")
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(
        &mut buf,
        FixedDigits(PrettyFormatter::with_indent(b"  ")),
    );
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Config(format!("cannot serialize report: {e}")))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}

#[derive(Debug, Serialize)]
pub struct InstrumentReport {
    pub version: String,
    pub target: Target,
    pub labels: Vec<String>,
    pub wald: WaldTestResult,
    pub first: EstimateReport,
    pub second: EstimateReport,
    pub seed: u64,
    pub config: serde_json::Value,
}

fn load(cfg: &RunConfig, instrument: &str) -> Result<(IvDataset, ColumnSchema)> {
    let path = cfg.data_path()?;
    let header = read_header(path)?;
    let schema = cfg.schema(&header, instrument)?;
    let data = load_csv(path, &schema)?;
    Ok((data, schema))
}

fn finish_report(report: &mut EstimateReport, cfg: &RunConfig) -> Result<()> {
    report.seed = cfg.seed;
    report.config = cfg.echo();
    if cfg.band && matches!(report.target, Target::CounterfactualCdf { .. }) {
        let usable: Vec<usize> = (0..report.theta.len())
            .filter(|&j| report.cov[j][j] > 0.0)
            .collect();
        if !usable.is_empty() {
            report.band = Some(band_for_report(
                report,
                Some(&usable),
                cfg.alpha,
                cfg.bootstrap_draws,
                cfg.seed,
            )?);
        }
    }
    Ok(())
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<String> {
    let estimator = cfg.estimator_config()?;
    let spec = cfg.dictionary_spec();
    let (data, schema) = load(cfg, &cfg.instrument)?;
    let target = cfg.target_for(&schema)?;
    let mut report = cross_fit_estimate(&data, &target, &spec, &estimator)?;
    finish_report(&mut report, cfg)?;
    to_json(&report)
}

pub fn cmd_test_instruments(cfg: &RunConfig) -> Result<String> {
    if cfg.instrument2.is_empty() {
        return Err(Error::Config(
            "test-instruments needs `instrument2` (the second instrument column)".into(),
        ));
    }
    let estimator = cfg.estimator_config()?;
    let (data, schema) = load(cfg, &cfg.instrument)?;
    let (other, _) = load(cfg, &cfg.instrument2)?;
    let target = cfg.target_for(&schema)?;
    let cmp = instrument_equality_test(
        &data,
        other.z(),
        &target,
        &cfg.dictionary_spec(),
        &estimator,
        cfg.alpha,
    )?;
    let mut first = cmp.first;
    let mut second = cmp.second;
    first.seed = cfg.seed;
    second.seed = cfg.seed;
    first.config = serde_json::Value::Null;
    second.config = serde_json::Value::Null;
    let report = InstrumentReport {
        version: VERSION.to_string(),
        labels: first.labels.clone(),
        target,
        wald: cmp.test,
        first,
        second,
        seed: cfg.seed,
        config: cfg.echo(),
    };
    to_json(&report)
}

fn csv_preamble(cfg: &RunConfig, command: &str) -> String {
    let echo = serde_json::to_string(&cfg.echo()).expect("config serializes");
    format!(
        "# autodml-iv {VERSION} {command}\n# seed {}\n# config {echo}\n",
        cfg.seed
    )
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<String> {
    if cfg.design != "appendix-f" {
        return Err(Error::Config(format!(
            "unknown design `{}` (only appendix-f)",
            cfg.design
        )));
    }
    let (beta, delta) = if cfg.grid.is_empty() {
        (beta_grid(), delta_grid())
    } else {
        (cfg.grid.clone(), cfg.grid.clone())
    };
    let mc = McConfig {
        reps: cfg.reps,
        n: cfg.n,
        methods: cfg.mc_methods()?,
        beta_grid: beta,
        delta_grid: delta,
        folds: cfg.folds,
        lambda_multiplier: cfg.lambda_multiplier,
        propensity_lambda_multiplier: cfg.propensity_lambda_multiplier,
        seed: cfg.seed,
        dictionary: DictionarySpec::simulation_preset(),
        coverage: None,
    };
    let summary = run_monte_carlo(&mc)?;
    Ok(csv_preamble(cfg, "simulate") + &summary.to_csv_string()?)
}

pub fn cmd_truth(cfg: &RunConfig) -> Result<String> {
    let (beta_pts, delta_pts) = if cfg.grid.is_empty() {
        (beta_grid(), delta_grid())
    } else {
        (cfg.grid.clone(), cfg.grid.clone())
    };
    let beta = truth_oracle(&beta_pts)?.0;
    let delta = truth_oracle(&delta_pts)?.1;
    let mut out = csv_preamble(cfg, "truth");
    out.push_str("parameter,y,value\n");
    for (y, v) in beta_pts.iter().zip(&beta) {
        out.push_str(&format!("beta,{y},{}\n", format_float(*v)));
    }
    for (y, v) in delta_pts.iter().zip(&delta) {
        out.push_str(&format!("delta,{y},{}\n", format_float(*v)));
    }
    Ok(out)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|source| Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })
        }
    }
}

fn execute(command: &Command) -> Result<()> {
    let (flags, run): (&Flags, fn(&RunConfig) -> Result<String>) = match command {
        Command::Fit(f) => (f, cmd_fit),
        Command::Simulate(f) => (f, cmd_simulate),
        Command::Truth(f) => (f, cmd_truth),
        Command::TestInstruments(f) => (f, cmd_test_instruments),
    };
    let cfg = RunConfig::from_flags(flags)?;
    let text = if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} threads: {e}", cfg.threads)))?;
        pool.install(|| run(&cfg))?
    } else {
        run(&cfg)?
    };
    write_output(cfg.out.as_deref(), &text)
}

/// Machine-readable error object written to standard error.
pub fn error_json(kind: &str, code: i32, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "code": code, "message": message } }).to_string()
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(
                e.kind(),
                K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return 0;
            }
            eprintln!("{}", error_json("config", 2, e.to_string().trim()));
            return 2;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let kind = e.kind();
            eprintln!(
                "{}",
                error_json(kind.as_str(), kind.exit_code(), &e.to_string())
            );
            kind.exit_code()
        }
    }
}
