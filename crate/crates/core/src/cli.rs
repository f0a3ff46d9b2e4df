//! Command-line surface: argument schema, dispatch and output formats.
//!
//! Everything here returns strings so that callers (the binary, tests) decide
//! where the bytes go; nothing is written until a command has fully succeeded.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::calculus::{brent, expand_bracket};
use crate::error::{BdmError, Result};
use crate::model::{self, cushings, exponential_model, fit_geometry, logistic_model, DerivativeSource, ModelSpec, PosteriorGeometry};
use crate::otmap::{bdm_sn_multi_in, Frame};
use crate::sks::{self, marginal_sks_fit, sks_fit, MarginalSksFit, SkewModalFit, VFormula};
use crate::snmatch::{bdm_sn_univariate, sn_fit, sn_marginal, MatchInputs, SnParams};
use crate::specialfn::{norm_cdf, norm_pdf, reg_gamma, sn_pdf, sn_quantile, Probability};
use crate::univariate::{self as uv, BdmResult, Method, PriorMode};
use crate::verify;

const SOURCE: DerivativeSource = DerivativeSource::LogPosterior;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Exponential,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FrameArg {
    Raw,
    Whitened,
}

impl From<FrameArg> for Frame {
    fn from(f: FrameArg) -> Frame {
        match f {
            FrameArg::Raw => Frame::Raw,
            FrameArg::Whitened => Frame::Whitened,
        }
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

/// Model selection shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "exponential")]
    pub model: ModelKind,
    /// Sample size (exponential).
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    /// Maximum likelihood estimate (exponential).
    #[arg(long, default_value_t = 1.2)]
    pub mle: f64,
    /// CSV with covariate columns and a 0/1 column named `y` (logistic).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Standard deviation of the independent normal prior (logistic).
    #[arg(long, default_value_t = 5.0)]
    pub prior_sd: f64,
    /// Coordinate(s) of interest, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub psi_index: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_parser = parse_method, default_value = "ho")]
    pub method: Method,
    /// Hypothesized value(s), comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub theta0: Vec<f64>,
    /// Likelihood-ratio statistic instead of Wald for `--method wald`.
    #[arg(long)]
    pub lr: bool,
    /// Frame of the transport map for joint `--method sn`.
    #[arg(long, value_enum, default_value = "whitened")]
    pub frame: FrameArg,
    #[arg(long, value_enum, default_value = "json")]
    pub output: OutputFormat,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TableArgs {
    #[arg(long, default_value_t = 1.2)]
    pub mle: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CurveArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// `lo:hi:points`.
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    pub grid: Grid,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Run only these criteria, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub criteria: Vec<u8>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Regenerate the exponential comparison table.
    Table(TableArgs),
    /// Posterior density curves per method on a grid.
    Curve(CurveArgs),
    /// Run the acceptance checks.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Parser)]
#[command(name = "bdm", version, about = "Bayesian discrepancy measure for precise hypotheses", args_conflicts_with_subcommands = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    #[command(flatten)]
    pub eval: EvalArgs,
}

/// What a finished command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub output: String,
    pub out_path: Option<PathBuf>,
    pub exit_code: i32,
}

pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(err: &BdmError) -> i32 {
    if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_CONFIG
    }
}

/// One-line machine-readable error for the error stream.
pub fn error_line(err: &BdmError) -> String {
    serde_json::json!({ "error": err.kind(), "message": err.to_string() }).to_string()
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        None => {
            let r = cmd_bdm(&cli.eval)?;
            let output = match cli.eval.output {
                OutputFormat::Json => result_json(&r),
                OutputFormat::Csv => format!("{}\n{}\n", RESULT_CSV_HEADER, result_csv_row(&r)),
            };
            Ok(Outcome { output, out_path: cli.eval.out.clone(), exit_code: 0 })
        }
        Some(Command::Table(a)) => {
            let rows = exponential_table(a.mle)?;
            Ok(Outcome { output: render_table(&rows), out_path: a.out.clone(), exit_code: 0 })
        }
        Some(Command::Curve(a)) => Ok(Outcome { output: cmd_curve(a)?, out_path: a.out.clone(), exit_code: 0 }),
        Some(Command::Check(a)) => {
            let report = verify::run_checks(&verify::CheckSettings::with_seed(a.seed), &a.criteria)?;
            let code = if report.passed() { 0 } else { EXIT_CHECK_FAILED };
            Ok(Outcome { output: report.render(), out_path: a.out.clone(), exit_code: code })
        }
    }
}

// ---------------------------------------------------------------- evaluation

/// A model with its posterior geometry, ready for repeated evaluation.
pub struct Fitted {
    pub kind: ModelKind,
    pub model: ModelSpec,
    pub geom: PosteriorGeometry,
    // (n, mle) of the exponential model, which has a closed-form posterior
    summary: Option<(usize, f64)>,
}

impl Fitted {
    pub fn exponential(n: usize, mle: f64) -> Result<Fitted> {
        check_exponential(n, mle)?;
        let model = exponential_model(n, mle)?.0;
        let geom = fit_geometry(&model)?;
        Ok(Fitted { kind: ModelKind::Exponential, model, geom, summary: Some((n, mle)) })
    }

    pub fn logistic(data: &model::Dataset, prior_sd: f64) -> Result<Fitted> {
        check_prior_sd(prior_sd)?;
        let model = logistic_model(data, prior_sd)?;
        let geom = fit_geometry(&model)?;
        Ok(Fitted { kind: ModelKind::Logistic, model, geom, summary: None })
    }

    pub fn new(args: &ModelArgs) -> Result<Fitted> {
        match args.model {
            ModelKind::Exponential => Fitted::exponential(args.n, args.mle),
            ModelKind::Logistic => Fitted::logistic(&load_data(args)?, args.prior_sd),
        }
    }

    pub fn dim(&self) -> usize {
        self.geom.dim()
    }
}

fn load_data(args: &ModelArgs) -> Result<model::Dataset> {
    match &args.data {
        Some(p) => model::load_csv(p),
        None => Ok(cushings()),
    }
}

fn check_exponential(n: usize, mle: f64) -> Result<()> {
    if n == 0 || !(mle > 0.0) || !mle.is_finite() {
        return Err(BdmError::Domain("exponential model needs n >= 1 and mle > 0".into()));
    }
    Ok(())
}

fn check_prior_sd(sd: f64) -> Result<()> {
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(BdmError::Domain("--prior-sd must be positive".into()));
    }
    Ok(())
}

fn model_dim(args: &ModelArgs) -> Result<usize> {
    match args.model {
        ModelKind::Exponential => Ok(1),
        ModelKind::Logistic => Ok(load_data(args)?.observations.ncols() + 1),
    }
}

/// One evaluation request against a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub method: Method,
    /// Empty for scalar models; one index for a marginal, several for a joint hypothesis.
    pub psi_index: Vec<usize>,
    pub theta0: Vec<f64>,
    pub lr: bool,
    pub frame: Frame,
}

impl Request {
    pub fn from_args(args: &EvalArgs) -> Request {
        Request {
            method: args.method,
            psi_index: args.model.psi_index.clone(),
            theta0: args.theta0.clone(),
            lr: args.lr,
            frame: args.frame.into(),
        }
    }
}

/// How a request is evaluated, decided before any numerical work.
#[derive(Debug, Clone, PartialEq)]
enum Target {
    Scalar,
    Marginal(usize),
    Joint(Vec<usize>),
}

fn plan(kind: ModelKind, dim: usize, req: &Request) -> Result<Target> {
    if req.theta0.is_empty() {
        return Err(BdmError::Domain("--theta0 is required".into()));
    }
    if req.theta0.iter().any(|v| !v.is_finite()) {
        return Err(BdmError::Domain("--theta0 values must be finite".into()));
    }
    match kind {
        ModelKind::Exponential => {
            if !(req.psi_index.is_empty() || req.psi_index == [0]) {
                return Err(BdmError::Domain("exponential model has a single parameter (index 0)".into()));
            }
            if req.theta0.len() != 1 {
                return Err(BdmError::Dimension { expected: "1 value for --theta0".into(), got: req.theta0.len() });
            }
            if !(req.theta0[0] > 0.0) {
                return Err(BdmError::Domain("exponential rate parameter must be positive".into()));
            }
            Ok(Target::Scalar)
        }
        ModelKind::Logistic => {
            if let Some(&bad) = req.psi_index.iter().find(|&&i| i >= dim) {
                return Err(BdmError::Dimension { expected: format!("--psi-index < {dim}"), got: bad });
            }
            let target = match req.psi_index.len() {
                1 => Target::Marginal(req.psi_index[0]),
                0 => Target::Joint((0..dim).collect()),
                _ => Target::Joint(req.psi_index.clone()),
            };
            let want = match &target {
                Target::Marginal(_) => 1,
                Target::Joint(idx) => idx.len(),
                Target::Scalar => unreachable!(),
            };
            if req.theta0.len() != want {
                return Err(BdmError::Dimension { expected: format!("{want} values for --theta0"), got: req.theta0.len() });
            }
            match (&target, req.method) {
                (Target::Marginal(_), Method::SksNum) => Err(BdmError::Capability(
                    "sks-num is defined for scalar models; marginal sks already integrates numerically".into(),
                )),
                (Target::Joint(_), Method::Wald | Method::Sn) => Ok(target),
                (Target::Joint(_), m) => Err(BdmError::Capability(format!(
                    "method {m} needs a single --psi-index; joint hypotheses support wald and sn"
                ))),
                _ => Ok(target),
            }
        }
    }
}

fn scalar_sn(geom: &PosteriorGeometry) -> Result<(SnParams, f64)> {
    let f = sn_fit(&MatchInputs::from_geometry(geom, SOURCE)?)?;
    Ok((f.params, f.kappa))
}

/// Computes one discrepancy value. Arguments are validated before the model is fitted.
pub fn cmd_bdm(args: &EvalArgs) -> Result<BdmResult> {
    let m = &args.model;
    match m.model {
        ModelKind::Exponential => check_exponential(m.n, m.mle)?,
        ModelKind::Logistic => check_prior_sd(m.prior_sd)?,
    }
    let req = Request::from_args(args);
    let target = plan(m.model, model_dim(m)?, &req)?;
    if target == Target::Scalar && req.method == Method::Exact {
        return uv::bdm_exact_exponential(m.n, m.mle, req.theta0[0]);
    }
    dispatch(&Fitted::new(m)?, &req, target)
}

/// Evaluates `req` against an already fitted model.
pub fn evaluate(fitted: &Fitted, req: &Request) -> Result<BdmResult> {
    let target = plan(fitted.kind, fitted.dim(), req)?;
    dispatch(fitted, req, target)
}

fn dispatch(fitted: &Fitted, req: &Request, target: Target) -> Result<BdmResult> {
    let Fitted { model, geom, .. } = fitted;
    match target {
        Target::Scalar => {
            let t = req.theta0[0];
            match req.method {
                Method::Io => uv::bdm_io(geom, t),
                Method::Ho => uv::bdm_ho(model, geom, t, PriorMode::General),
                Method::Sks => Ok(sks::bdm_sks(&sks_fit(geom, SOURCE)?, t)),
                Method::SksNum => sks::bdm_sks_numeric(&sks_fit(geom, SOURCE)?, t),
                Method::Sn => {
                    let (p, kappa) = scalar_sn(geom)?;
                    Ok(bdm_sn_univariate(&p, t)?.with("kappa", kappa))
                }
                Method::Wald => uv::bdm_wald_multi(model, geom, &[], &[t], req.lr),
                Method::Exact => match fitted.summary {
                    Some((n, mle)) => uv::bdm_exact_exponential(n, mle, t),
                    None => Err(BdmError::Capability("no exact posterior for this model".into())),
                },
            }
        }
        Target::Marginal(k) => {
            let t = req.theta0[0];
            let r = match req.method {
                Method::Io => uv::bdm_io_profile(model, geom, k, t),
                Method::Ho => uv::bdm_ho_profile(model, geom, k, t),
                Method::Sks => sks::bdm_marginal_sks(&marginal_sks_fit(geom, k, SOURCE, VFormula::Marginalized)?, t),
                Method::Sn => {
                    let (p, kappa) = scalar_sn(geom)?;
                    Ok(bdm_sn_univariate(&sn_marginal(&p, &[k])?, t)?.with("kappa", kappa))
                }
                Method::Wald => uv::bdm_wald_multi(model, geom, &[k], &[t], req.lr),
                Method::Exact => uv::bdm_exact_quadrature(model, geom, k, t),
                Method::SksNum => unreachable!(),
            }?;
            Ok(r.with("psi_index", k as f64))
        }
        Target::Joint(idx) => match req.method {
            Method::Wald => uv::bdm_wald_multi(model, geom, &idx, &req.theta0, req.lr),
            Method::Sn => {
                let (p, kappa) = scalar_sn(geom)?;
                let marg = if idx.len() == geom.dim() && idx.iter().enumerate().all(|(a, &i)| a == i) { p } else { sn_marginal(&p, &idx)? };
                Ok(bdm_sn_multi_in(&marg, &req.theta0, req.frame)?.with("kappa", kappa))
            }
            _ => unreachable!(),
        },
    }
}

// ---------------------------------------------------------------- result I/O

pub fn result_json(r: &BdmResult) -> String {
    let mut s = serde_json::to_string(r).expect("result serializes");
    s.push('\n');
    s
}

pub const RESULT_CSV_HEADER: &str = "method,theta0,delta,tail_low,clamped,diagnostics";

fn join_f64(v: &[f64], sep: &str) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(sep)
}

/// `theta0` is `;`-joined, diagnostics are `key=value` pairs joined by `;`.
pub fn result_csv_row(r: &BdmResult) -> String {
    let diag: Vec<String> = r.diagnostics.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!(
        "{},{},{},{},{},{}",
        r.method,
        join_f64(&r.theta0, ";"),
        r.delta.value(),
        r.tail_low.map(|p| format!("{}", p.value())).unwrap_or_default(),
        r.clamped,
        diag.join(";")
    )
}

fn parse_f64(field: &str, what: &str, line: usize) -> Result<f64> {
    field.parse().map_err(|_| BdmError::Parse { line, message: format!("bad {what} '{field}'") })
}

pub fn parse_result_csv_row(line: &str, line_no: usize) -> Result<BdmResult> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 6 {
        return Err(BdmError::Parse { line: line_no, message: format!("expected 6 fields, got {}", f.len()) });
    }
    let method = Method::parse(f[0]).map_err(|e| BdmError::Parse { line: line_no, message: e.to_string() })?;
    let theta0 = f[1].split(';').map(|s| parse_f64(s, "theta0", line_no)).collect::<Result<Vec<_>>>()?;
    let delta = Probability::new(parse_f64(f[2], "delta", line_no)?)?;
    let tail_low = if f[3].is_empty() { None } else { Some(Probability::new(parse_f64(f[3], "tail_low", line_no)?)?) };
    let clamped = f[4].parse().map_err(|_| BdmError::Parse { line: line_no, message: format!("bad clamped '{}'", f[4]) })?;
    let mut diagnostics = BTreeMap::new();
    for kv in f[5].split(';').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| BdmError::Parse { line: line_no, message: format!("bad diagnostic '{kv}'") })?;
        diagnostics.insert(k.to_string(), parse_f64(v, "diagnostic", line_no)?);
    }
    Ok(BdmResult { method, theta0, delta, tail_low, clamped, diagnostics })
}

// ---------------------------------------------------------------- table

pub const TABLE_NS: [usize; 4] = [6, 12, 20, 40];
pub const TABLE_METHODS: [Method; 6] = [Method::Io, Method::Ho, Method::Sks, Method::SksNum, Method::Sn, Method::Exact];

pub fn table_thetas() -> Vec<f64> {
    (1..=8).map(|k| k as f64 * 3.0 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub n: usize,
    pub theta0: f64,
    /// In [`TABLE_METHODS`] order.
    pub values: [f64; 6],
}

/// Round half to even at two decimals.
pub fn round2(x: f64) -> String {
    let r = (x * 100.0).round_ties_even() / 100.0;
    let s = format!("{r:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// All six methods for one exponential posterior.
pub struct ExponentialCells {
    pub n: usize,
    pub mle: f64,
    model: ModelSpec,
    geom: PosteriorGeometry,
    sks: SkewModalFit,
    sn: SnParams,
}

impl ExponentialCells {
    pub fn new(n: usize, mle: f64) -> Result<Self> {
        let (model, _) = exponential_model(n, mle)?;
        let geom = fit_geometry(&model)?;
        let sks = sks_fit(&geom, SOURCE)?;
        let sn = scalar_sn(&geom)?.0;
        Ok(ExponentialCells { n, mle, model, geom, sks, sn })
    }

    pub fn eval(&self, method: Method, theta0: f64) -> Result<BdmResult> {
        match method {
            Method::Io => uv::bdm_io(&self.geom, theta0),
            Method::Ho => uv::bdm_ho(&self.model, &self.geom, theta0, PriorMode::General),
            Method::Sks => Ok(sks::bdm_sks(&self.sks, theta0)),
            Method::SksNum => sks::bdm_sks_numeric(&self.sks, theta0),
            Method::Sn => bdm_sn_univariate(&self.sn, theta0),
            Method::Exact => uv::bdm_exact_exponential(self.n, self.mle, theta0),
            Method::Wald => uv::bdm_wald_multi(&self.model, &self.geom, &[], &[theta0], false),
        }
    }

    pub fn geometry(&self) -> &PosteriorGeometry {
        &self.geom
    }
}

pub fn exponential_table(mle: f64) -> Result<Vec<TableRow>> {
    if !(mle > 0.0) || !mle.is_finite() {
        return Err(BdmError::Domain("--mle must be positive".into()));
    }
    let mut rows = Vec::new();
    for n in TABLE_NS {
        let cells = ExponentialCells::new(n, mle)?;
        for theta0 in table_thetas() {
            let mut values = [0.0; 6];
            for (v, m) in values.iter_mut().zip(TABLE_METHODS) {
                *v = cells.eval(m, theta0)?.delta();
            }
            rows.push(TableRow { n, theta0, values });
        }
    }
    Ok(rows)
}

pub fn table_header() -> String {
    let mut cols = vec!["n".to_string(), "theta0".to_string()];
    for m in TABLE_METHODS {
        let name = m.as_str().replace('-', "_");
        cols.push(name.clone());
        cols.push(format!("{name}_2dp"));
    }
    cols.join(",")
}

pub fn render_table(rows: &[TableRow]) -> String {
    let mut out = table_header();
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{}", r.n, r.theta0));
        for v in r.values {
            out.push_str(&format!(",{v},{}", round2(v)));
        }
        out.push('\n');
    }
    out
}

pub fn parse_table(text: &str) -> Result<Vec<TableRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(table_header().as_str()) {
        return Err(BdmError::Parse { line: 1, message: "unexpected table header".into() });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(BdmError::Parse { line: ln, message: format!("expected 14 fields, got {}", f.len()) });
        }
        let n = f[0].parse().map_err(|_| BdmError::Parse { line: ln, message: format!("bad n '{}'", f[0]) })?;
        let theta0 = parse_f64(f[1], "theta0", ln)?;
        let mut values = [0.0; 6];
        for (k, v) in values.iter_mut().enumerate() {
            *v = parse_f64(f[2 + 2 * k], "value", ln)?;
            if round2(*v) != f[3 + 2 * k] {
                return Err(BdmError::Parse { line: ln, message: format!("rounded column disagrees with '{}'", f[2 + 2 * k]) });
            }
        }
        rows.push(TableRow { n, theta0, values });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- curves

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points).map(|i| if i + 1 == self.points { self.hi } else { self.lo + i as f64 * step }).collect()
    }
}

pub fn parse_grid(s: &str) -> std::result::Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("grid must be lo:hi:points, got '{s}'"));
    }
    let lo: f64 = parts[0].parse().map_err(|_| format!("bad grid start '{}'", parts[0]))?;
    let hi: f64 = parts[1].parse().map_err(|_| format!("bad grid end '{}'", parts[1]))?;
    let points: usize = parts[2].parse().map_err(|_| format!("bad grid size '{}'", parts[2]))?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) || points < 2 {
        return Err(format!("grid needs finite lo < hi and at least 2 points, got '{s}'"));
    }
    Ok(Grid { lo, hi, points })
}

pub const CURVE_HEADER: &str = "kind,theta,exact,normal,sks,sn,ho";

/// Densities of one scalar or marginal target.
struct Curves {
    exact: Option<Box<dyn Fn(f64) -> f64>>,
    normal: (f64, f64),
    sks: Box<dyn Fn(f64) -> f64>,
    sn: SnParams,
    ho_tail_low: Box<dyn Fn(f64) -> Result<f64>>,
    medians: [Option<f64>; 5],
}

fn median_by_root(cdf: &dyn Fn(f64) -> f64, center: f64, sd: f64) -> Result<f64> {
    let g = |x: f64| cdf(x) - 0.5;
    let step = if g(center) > 0.0 { -sd } else { sd };
    let (lo, hi) = expand_bracket(&g, center, step, 60)?;
    brent(&g, lo, hi, 1e-12 * center.abs().max(1.0))
}

fn exponential_curves(n: usize, mle: f64) -> Result<Curves> {
    let (model, _) = exponential_model(n, mle)?;
    let geom = fit_geometry(&model)?;
    let fit = sks_fit(&geom, SOURCE)?;
    let sn = scalar_sn(&geom)?.0;
    let shape = n as f64;
    let rate = n as f64 * mle;
    let log_norm = shape * rate.ln() - libm::lgamma(shape);
    let exact = move |t: f64| if t > 0.0 { (log_norm - (shape + 1.0) * t.ln() - rate / t).exp() } else { 0.0 };
    let sd = 1.0 / geom.obs_info_mle[(0, 0)].sqrt();
    let x_med = median_by_root(&|x| reg_gamma(shape, x).map(|p| p.0).unwrap_or(f64::NAN), shape, shape.sqrt())?;
    let sks_cdf = |t: f64| sks::sks_tail_numeric(&fit, t).map(|u| 1.0 - u).unwrap_or(f64::NAN);
    let sks_med = median_by_root(&sks_cdf, fit.center, sd)?;
    let medians = [
        Some(rate / x_med),
        Some(geom.mle[0]),
        Some(sks_med),
        Some(sn_quantile(0.5, sn.xi[0], sn.omega[(0, 0)], sn.alpha[0])?),
        Some(uv::posterior_median_rstar(&model, &geom, None)?),
    ];
    let ho_tail_low = move |t: f64| uv::rstar(&model, &geom, t, PriorMode::General).map(|e| norm_cdf(-e.rstar));
    Ok(Curves {
        exact: Some(Box::new(exact)),
        normal: (medians[1].unwrap(), sd),
        sks: Box::new(move |t| sks::sks_density_theta(&fit, t)),
        sn,
        ho_tail_low: Box::new(ho_tail_low),
        medians,
    })
}

fn marginal_sks_density(fit: &MarginalSksFit, psi: f64) -> f64 {
    let nf = fit.n as f64;
    let s = fit.omega11.sqrt();
    let z = nf.sqrt() * (psi - fit.center) / s;
    2.0 * norm_pdf(z) * norm_cdf(fit.alpha(s * z)) * nf.sqrt() / s
}

fn marginal_curves(args: &ModelArgs, k: usize) -> Result<Curves> {
    let Fitted { model, geom, .. } = Fitted::new(args)?;
    let jp = uv::profile_information(&geom, k)?;
    let sd = 1.0 / jp.sqrt();
    let mfit = marginal_sks_fit(&geom, k, SOURCE, VFormula::Marginalized)?;
    let sn = sn_marginal(&scalar_sn(&geom)?.0, &[k])?;
    let sks_cdf = |t: f64| sks::marginal_sks_tails(&mfit, t).map(|p| p.0).unwrap_or(f64::NAN);
    let medians = [
        None,
        Some(geom.mle[k]),
        Some(median_by_root(&sks_cdf, mfit.center, sd)?),
        Some(sn_quantile(0.5, sn.xi[0], sn.omega[(0, 0)], sn.alpha[0])?),
        Some(uv::posterior_median_rstar(&model, &geom, Some(k))?),
    ];
    let ho_tail_low = move |t: f64| uv::rstar_profile(&model, &geom, k, t).map(|e| norm_cdf(-e.rstar));
    Ok(Curves {
        exact: None,
        normal: (medians[1].unwrap(), sd),
        sks: Box::new(move |t| marginal_sks_density(&mfit, t)),
        sn,
        ho_tail_low: Box::new(ho_tail_low),
        medians,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Density rows `density,θ,...` followed by one `median,,...` row.
pub fn cmd_curve(args: &CurveArgs) -> Result<String> {
    let m = &args.model;
    let curves = match m.model {
        ModelKind::Exponential => {
            if !(m.psi_index.is_empty() || m.psi_index == [0]) {
                return Err(BdmError::Domain("exponential model has a single parameter (index 0)".into()));
            }
            if m.n == 0 || !(m.mle > 0.0) {
                return Err(BdmError::Domain("exponential model needs n >= 1 and mle > 0".into()));
            }
            if args.grid.lo <= 0.0 {
                return Err(BdmError::Domain("exponential grid must be positive".into()));
            }
            exponential_curves(m.n, m.mle)?
        }
        ModelKind::Logistic => match m.psi_index.as_slice() {
            [k] => {
                let d = model_dim(m)?;
                if *k >= d {
                    return Err(BdmError::Dimension { expected: format!("--psi-index < {d}"), got: *k });
                }
                marginal_curves(m, *k)?
            }
            _ => return Err(BdmError::Capability("curves need a scalar target; pass one --psi-index".into())),
        },
    };
    let grid = args.grid.values();
    let step = (args.grid.hi - args.grid.lo) / (args.grid.points - 1) as f64;
    let (mu, sd) = curves.normal;
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for &t in &grid {
        // Central difference of the tail area. r* carries ~1e-3 roundoff within
        // 1e-3 sd of the MLE, so the half-width stays clear of that zone.
        let h = (2e-2 * sd).min(0.25 * step);
        let ho = ((curves.ho_tail_low)(t + h)? - (curves.ho_tail_low)(t - h)?) / (2.0 * h);
        let row = [
            curves.exact.as_ref().map(|f| f(t)),
            Some(norm_pdf((t - mu) / sd) / sd),
            Some((curves.sks)(t)),
            Some(sn_pdf(t, curves.sn.xi[0], curves.sn.omega[(0, 0)], curves.sn.alpha[0])),
            Some(ho),
        ];
        out.push_str(&format!("density,{t}"));
        for v in row {
            out.push(',');
            out.push_str(&fmt_opt(v));
        }
        out.push('\n');
    }
    out.push_str("median,");
    for v in curves.medians {
        out.push(',');
        out.push_str(&fmt_opt(v));
    }
    out.push('\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_even_rounding() {
        assert_eq!(round2(0.125), "0.12");
        assert_eq!(round2(0.375), "0.38");
        assert_eq!(round2(-0.001), "0.00");
        assert_eq!(round2(0.999), "1.00");
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.3:3:300").unwrap();
        assert_eq!(g.values().len(), 300);
        assert_eq!(*g.values().last().unwrap(), 3.0);
        assert!(parse_grid("1:0:10").is_err());
        assert!(parse_grid("0:1").is_err());
    }

    #[test]
    fn csv_row_round_trip() {
        let r = uv::bdm_exact_exponential(6, 1.2, 0.9).unwrap().with("x", 0.1);
        let line = result_csv_row(&r);
        let back = parse_result_csv_row(&line, 2).unwrap();
        assert_eq!(back, r);
        assert_eq!(result_csv_row(&back), line);
    }
}
