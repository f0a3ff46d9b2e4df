//! Statistical models, data loading, posterior geometry and exact-posterior
//! oracles.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::calculus::{self, MaxOptions, Tensor3};
use crate::error::{BdmError, Result};
use crate::specialfn::reg_gamma;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradHessArc = Arc<dyn Fn(&[f64]) -> (DVector<f64>, DMatrix<f64>) + Send + Sync>;
pub type ThirdArc = Arc<dyn Fn(&[f64]) -> Tensor3 + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type DomainFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Observed data: covariate matrix, optional binary response, sample size.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub observations: DMatrix<f64>,
    pub response: Option<DVector<f64>>,
    pub n: usize,
}

impl Dataset {
    pub fn new(columns: Vec<String>, observations: DMatrix<f64>, response: Option<DVector<f64>>) -> Result<Self> {
        let n = observations.nrows();
        if n == 0 {
            return Err(BdmError::Schema("dataset has no rows".into()));
        }
        if columns.len() != observations.ncols() {
            return Err(BdmError::Dimension { expected: format!("{} column names", observations.ncols()), got: columns.len() });
        }
        if let Some(y) = &response {
            if y.len() != n {
                return Err(BdmError::Dimension { expected: format!("{n} responses"), got: y.len() });
            }
        }
        Ok(Dataset { columns, observations, response, n })
    }
}

/// Log prior density with optional analytic derivatives.
#[derive(Clone)]
pub struct Prior {
    pub name: String,
    logpdf: ScalarFn,
    derivs: Option<GradHessArc>,
    third: Option<ThirdArc>,
}

impl Prior {
    pub fn new(name: &str, logpdf: ScalarFn) -> Self {
        Prior { name: name.to_string(), logpdf, derivs: None, third: None }
    }

    pub fn with_derivatives(mut self, derivs: GradHessArc, third: ThirdArc) -> Self {
        self.derivs = Some(derivs);
        self.third = Some(third);
        self
    }

    pub fn flat(d: usize) -> Self {
        Prior::new("flat", Arc::new(|_| 0.0)).with_derivatives(
            Arc::new(move |_| (DVector::zeros(d), DMatrix::zeros(d, d))),
            Arc::new(move |_| Tensor3::zeros(d)),
        )
    }

    /// Independent `N(0, sd²)` on every coordinate.
    pub fn normal(d: usize, sd: f64) -> Self {
        let v = sd * sd;
        let c = -(d as f64) * (sd * (2.0 * std::f64::consts::PI).sqrt()).ln();
        Prior::new(&format!("normal(sd={sd})"), Arc::new(move |b| c - b.iter().map(|x| x * x).sum::<f64>() / (2.0 * v)))
            .with_derivatives(
                Arc::new(move |b| {
                    (DVector::from_iterator(d, b.iter().map(|x| -x / v)), DMatrix::from_diagonal_element(d, d, -1.0 / v))
                }),
                Arc::new(move |_| Tensor3::zeros(d)),
            )
    }

    /// `π(θ) ∝ 1/θ` on a positive scalar.
    pub fn jeffreys_scale() -> Self {
        Prior::new("jeffreys", Arc::new(|t| -t[0].ln())).with_derivatives(
            Arc::new(|t| {
                let x = t[0];
                (DVector::from_element(1, -1.0 / x), DMatrix::from_element(1, 1, 1.0 / (x * x)))
            }),
            Arc::new(|t| {
                let mut out = Tensor3::zeros(1);
                out.set(0, 0, 0, -2.0 / t[0].powi(3));
                out
            }),
        )
    }
}

impl fmt::Debug for Prior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Prior").field("name", &self.name).finish()
    }
}

/// Log-likelihood, prior and parameter metadata. Immutable once built.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub dim: usize,
    pub n: usize,
    pub param_names: Vec<String>,
    pub start: Vec<f64>,
    loglik: ScalarFn,
    loglik_derivs: Option<GradHessArc>,
    loglik_third: Option<ThirdArc>,
    expected_info: Option<MatrixFn>,
    domain: DomainFn,
    pub prior: Prior,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("n", &self.n)
            .field("prior", &self.prior)
            .finish()
    }
}

/// Which log-density supplies a derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeSource {
    LogLikelihood,
    LogPosterior,
}

impl ModelSpec {
    pub fn new(name: &str, dim: usize, n: usize, loglik: ScalarFn, prior: Prior) -> Self {
        ModelSpec {
            name: name.to_string(),
            dim,
            n,
            param_names: (0..dim).map(|i| format!("theta{i}")).collect(),
            start: vec![0.0; dim],
            loglik,
            loglik_derivs: None,
            loglik_third: None,
            expected_info: None,
            domain: Arc::new(|_| true),
            prior,
        }
    }

    pub fn with_loglik_derivatives(mut self, derivs: GradHessArc, third: Option<ThirdArc>) -> Self {
        self.loglik_derivs = Some(derivs);
        self.loglik_third = third;
        self
    }

    pub fn with_expected_info(mut self, info: MatrixFn) -> Self {
        self.expected_info = Some(info);
        self
    }

    pub fn with_domain(mut self, domain: DomainFn) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_start(mut self, start: Vec<f64>) -> Self {
        self.start = start;
        self
    }

    pub fn with_param_names(mut self, names: Vec<String>) -> Self {
        self.param_names = names;
        self
    }

    /// Same likelihood under a different prior.
    pub fn with_prior(&self, prior: Prior) -> Self {
        ModelSpec { prior, ..self.clone() }
    }

    pub fn in_domain(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim && (self.domain)(theta)
    }

    /// `ℓ(θ)`, `-∞` outside the parameter domain.
    pub fn loglik(&self, theta: &[f64]) -> f64 {
        if self.in_domain(theta) {
            (self.loglik)(theta)
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn logprior(&self, theta: &[f64]) -> f64 {
        if self.in_domain(theta) {
            (self.prior.logpdf)(theta)
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn logpost(&self, theta: &[f64]) -> f64 {
        self.loglik(theta) + self.logprior(theta)
    }

    pub fn log_density(&self, source: DerivativeSource, theta: &[f64]) -> f64 {
        match source {
            DerivativeSource::LogLikelihood => self.loglik(theta),
            DerivativeSource::LogPosterior => self.logpost(theta),
        }
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        self.loglik_derivs.is_some() && self.prior.derivs.is_some()
    }

    fn check_point(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim {
            return Err(BdmError::Dimension { expected: format!("{} parameters", self.dim), got: theta.len() });
        }
        if !self.in_domain(theta) {
            return Err(BdmError::Evaluation { point: theta.to_vec() });
        }
        Ok(())
    }

    /// Gradient and Hessian of `ℓ` (analytic when registered, else FD).
    pub fn loglik_grad_hess(&self, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_point(theta)?;
        match &self.loglik_derivs {
            Some(d) => Ok(d(theta)),
            None => {
                let f = |t: &[f64]| self.loglik(t);
                Ok((calculus::fd_gradient(&f, theta)?, calculus::fd_hessian(&f, theta)?))
            }
        }
    }

    fn prior_grad_hess(&self, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match &self.prior.derivs {
            Some(d) => Ok(d(theta)),
            None => {
                let f = |t: &[f64]| self.logprior(t);
                Ok((calculus::fd_gradient(&f, theta)?, calculus::fd_hessian(&f, theta)?))
            }
        }
    }

    pub fn grad_hess(&self, source: DerivativeSource, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (g, h) = self.loglik_grad_hess(theta)?;
        match source {
            DerivativeSource::LogLikelihood => Ok((g, h)),
            DerivativeSource::LogPosterior => {
                let (gp, hp) = self.prior_grad_hess(theta)?;
                Ok((g + gp, h + hp))
            }
        }
    }

    /// Full third-derivative tensor of the chosen log density.
    pub fn third(&self, source: DerivativeSource, theta: &[f64]) -> Result<Tensor3> {
        self.check_point(theta)?;
        let lik = match &self.loglik_third {
            Some(t) => t(theta),
            None => self.fd_third(|t| self.loglik(t), theta)?,
        };
        match source {
            DerivativeSource::LogLikelihood => Ok(lik),
            DerivativeSource::LogPosterior => {
                let pri = match &self.prior.third {
                    Some(t) => t(theta),
                    None => self.fd_third(|t| self.logprior(t), theta)?,
                };
                Ok(lik.add(&pri))
            }
        }
    }

    fn fd_third(&self, f: impl Fn(&[f64]) -> f64, theta: &[f64]) -> Result<Tensor3> {
        if self.dim > 3 {
            return Err(BdmError::Capability(format!(
                "third derivatives of '{}' in {} dimensions need analytic derivatives",
                self.name, self.dim
            )));
        }
        calculus::fd_third_full(&f, theta)
    }

    /// Expected information `i(θ)` if the model supplies it.
    pub fn expected_info(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        self.expected_info.as_ref().map(|i| i(theta))
    }

    /// Maximizes the chosen log density from the model's start point.
    pub fn maximize(&self, source: DerivativeSource) -> Result<DVector<f64>> {
        self.maximize_from(source, &self.start)
    }

    pub fn maximize_from(&self, source: DerivativeSource, x0: &[f64]) -> Result<DVector<f64>> {
        let f = |t: &[f64]| self.log_density(source, t);
        let opts = MaxOptions::default();
        if self.has_analytic_derivatives() {
            let gh = |t: &[f64]| {
                self.grad_hess(source, t)
                    .unwrap_or_else(|_| (DVector::from_element(t.len(), f64::NAN), DMatrix::from_element(t.len(), t.len(), f64::NAN)))
            };
            calculus::maximize_with(&f, Some(&gh), x0, opts)
        } else {
            calculus::maximize_with(&f, None, x0, opts)
        }
    }

    /// `λ̂_ψ`: maximizer of the chosen log density with coordinate `psi_index` fixed.
    pub fn profile(&self, source: DerivativeSource, psi_index: usize, psi: f64, lambda0: &[f64]) -> Result<DVector<f64>> {
        let f = |t: &[f64]| self.log_density(source, t);
        let opts = MaxOptions::default();
        if self.has_analytic_derivatives() {
            let gh = |t: &[f64]| {
                self.grad_hess(source, t)
                    .unwrap_or_else(|_| (DVector::from_element(t.len(), f64::NAN), DMatrix::from_element(t.len(), t.len(), f64::NAN)))
            };
            calculus::profile_maximize(&f, Some(&gh), psi_index, psi, lambda0, opts)
        } else {
            calculus::profile_maximize(&f, None, psi_index, psi, lambda0, opts)
        }
    }
}

/// Exponential sample with mean `θ`, summarized by `n` and `t_n = n·mle`,
/// under the Jeffreys prior `π(θ) ∝ 1/θ`.
pub fn exponential_model(n: usize, mle: f64) -> Result<(ModelSpec, Dataset)> {
    if n == 0 {
        return Err(BdmError::Domain("exponential model needs n >= 1".into()));
    }
    if !(mle > 0.0 && mle.is_finite()) {
        return Err(BdmError::Domain(format!("exponential MLE must be positive, got {mle}")));
    }
    let nf = n as f64;
    let t = nf * mle;
    let model = ModelSpec::new("exponential", 1, n, Arc::new(move |th| -nf * th[0].ln() - t / th[0]), Prior::jeffreys_scale())
        .with_loglik_derivatives(
            Arc::new(move |th| {
                let x = th[0];
                let g = -nf / x + t / (x * x);
                let h = nf / (x * x) - 2.0 * t / x.powi(3);
                (DVector::from_element(1, g), DMatrix::from_element(1, 1, h))
            }),
            Some(Arc::new(move |th| {
                let x = th[0];
                let mut out = Tensor3::zeros(1);
                out.set(0, 0, 0, -2.0 * nf / x.powi(3) + 6.0 * t / x.powi(4));
                out
            })),
        )
        .with_expected_info(Arc::new(move |th| DMatrix::from_element(1, 1, nf / (th[0] * th[0]))))
        .with_domain(Arc::new(|th| th[0] > 0.0))
        .with_start(vec![mle])
        .with_param_names(vec!["theta".into()]);
    let data = Dataset {
        columns: vec!["t_n".into()],
        observations: DMatrix::from_element(1, 1, t),
        response: None,
        n,
    };
    Ok((model, data))
}

/// Exponential model built from raw observations.
pub fn exponential_from_sample(sample: &[f64]) -> Result<(ModelSpec, Dataset)> {
    if sample.is_empty() {
        return Err(BdmError::Schema("empty sample".into()));
    }
    if sample.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(BdmError::Domain("exponential observations must be positive".into()));
    }
    let mean = sample.iter().sum::<f64>() / sample.len() as f64;
    let (model, _) = exponential_model(sample.len(), mean)?;
    let data = Dataset::new(vec!["x".into()], DMatrix::from_column_slice(sample.len(), 1, sample), None)?;
    Ok((model, data))
}

/// The exponential model in `φ = log θ`. The Jeffreys prior becomes flat.
pub fn exponential_log_model(n: usize, mle: f64) -> Result<ModelSpec> {
    exponential_model(n, mle)?;
    let nf = n as f64;
    let t = nf * mle;
    let model = ModelSpec::new("exponential-log", 1, n, Arc::new(move |p| -nf * p[0] - t * (-p[0]).exp()), Prior::flat(1))
        .with_loglik_derivatives(
            Arc::new(move |p| {
                let e = t * (-p[0]).exp();
                (DVector::from_element(1, -nf + e), DMatrix::from_element(1, 1, -e))
            }),
            Some(Arc::new(move |p| {
                let mut out = Tensor3::zeros(1);
                out.set(0, 0, 0, t * (-p[0]).exp());
                out
            })),
        )
        .with_expected_info(Arc::new(move |_| DMatrix::from_element(1, 1, nf)))
        .with_start(vec![mle.ln()])
        .with_param_names(vec!["log_theta".into()]);
    Ok(model)
}

/// Normal mean with known `sigma`, flat prior. Its log posterior is exactly quadratic.
pub fn normal_mean_model(n: usize, mean: f64, sigma: f64) -> Result<ModelSpec> {
    if n == 0 || !(sigma > 0.0) {
        return Err(BdmError::Domain("normal model needs n >= 1 and sigma > 0".into()));
    }
    let prec = n as f64 / (sigma * sigma);
    Ok(ModelSpec::new("normal-mean", 1, n, Arc::new(move |m| -0.5 * prec * (m[0] - mean).powi(2)), Prior::flat(1))
        .with_loglik_derivatives(
            Arc::new(move |m| (DVector::from_element(1, -prec * (m[0] - mean)), DMatrix::from_element(1, 1, -prec))),
            Some(Arc::new(|_| Tensor3::zeros(1))),
        )
        .with_expected_info(Arc::new(move |_| DMatrix::from_element(1, 1, prec)))
        .with_start(vec![mean])
        .with_param_names(vec!["mu".into()]))
}

fn log1p_exp(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli-logit regression with an intercept prepended to the covariates and
/// independent `N(0, prior_sd²)` priors on every coefficient.
pub fn logistic_model(data: &Dataset, prior_sd: f64) -> Result<ModelSpec> {
    let y = data
        .response
        .clone()
        .ok_or_else(|| BdmError::Schema("logistic model needs a response column 'y'".into()))?;
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(BdmError::Schema("logistic response must be 0/1".into()));
    }
    if !(prior_sd > 0.0) {
        return Err(BdmError::Domain(format!("prior sd must be positive, got {prior_sd}")));
    }
    let n = data.n;
    let p = data.observations.ncols() + 1;
    let mut x = DMatrix::from_element(n, p, 1.0);
    x.view_mut((0, 1), (n, p - 1)).copy_from(&data.observations);
    let x = Arc::new(x);
    let y = Arc::new(y);

    let (xl, yl) = (x.clone(), y.clone());
    let loglik = move |b: &[f64]| {
        let beta = DVector::from_column_slice(b);
        let eta = &*xl * beta;
        eta.iter().zip(yl.iter()).map(|(e, yi)| yi * e - log1p_exp(*e)).sum()
    };
    let (xd, yd) = (x.clone(), y.clone());
    let derivs = move |b: &[f64]| {
        let beta = DVector::from_column_slice(b);
        let eta = &*xd * beta;
        let prob = eta.map(sigmoid);
        let g = xd.transpose() * (&*yd - &prob);
        let w = prob.map(|q| q * (1.0 - q));
        let mut h = DMatrix::zeros(p, p);
        for i in 0..n {
            let row = xd.row(i);
            for a in 0..p {
                for c in 0..=a {
                    h[(a, c)] -= w[i] * row[a] * row[c];
                }
            }
        }
        for a in 0..p {
            for c in 0..a {
                h[(c, a)] = h[(a, c)];
            }
        }
        (g, h)
    };
    let xt = x.clone();
    let third = move |b: &[f64]| {
        let beta = DVector::from_column_slice(b);
        let eta = &*xt * beta;
        let mut out = Tensor3::zeros(p);
        for a in 0..p {
            for c in a..p {
                for e in c..p {
                    let mut s = 0.0;
                    for i in 0..n {
                        let q = sigmoid(eta[i]);
                        s -= q * (1.0 - q) * (1.0 - 2.0 * q) * xt[(i, a)] * xt[(i, c)] * xt[(i, e)];
                    }
                    out.set_sym(a, c, e, s);
                }
            }
        }
        out
    };
    let xi = x.clone();
    let info = move |b: &[f64]| {
        let beta = DVector::from_column_slice(b);
        let w = (&*xi * beta).map(|e| {
            let q = sigmoid(e);
            q * (1.0 - q)
        });
        let mut h = DMatrix::zeros(p, p);
        for i in 0..n {
            for a in 0..p {
                for c in 0..p {
                    h[(a, c)] += w[i] * xi[(i, a)] * xi[(i, c)];
                }
            }
        }
        h
    };
    let mut names = vec!["intercept".to_string()];
    names.extend(data.columns.iter().cloned());
    Ok(ModelSpec::new("logistic", p, n, Arc::new(loglik), Prior::normal(p, prior_sd))
        .with_loglik_derivatives(Arc::new(derivs), Some(Arc::new(third)))
        .with_expected_info(Arc::new(info))
        .with_param_names(names))
}

/// Reads a header-first numeric CSV. A column named `y` becomes the response.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| BdmError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_csv(file)
}

pub fn parse_csv(reader: impl Read) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| BdmError::Parse { line: 1, message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(BdmError::Schema("missing header row".into()));
    }
    let y_col = header.iter().position(|h| h == "y");
    let width = header.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| BdmError::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != width {
            return Err(BdmError::Parse { line, message: format!("expected {width} fields, found {}", rec.len()) });
        }
        let mut row = Vec::with_capacity(width);
        for (cell, name) in rec.iter().zip(&header) {
            let v: f64 = cell
                .parse()
                .map_err(|_| BdmError::Parse { line, message: format!("non-numeric value '{cell}' in column '{name}'") })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(BdmError::Schema("dataset has no rows (n >= 1 required)".into()));
    }
    let n = rows.len();
    let covariates: Vec<usize> = (0..width).filter(|&j| Some(j) != y_col).collect();
    let obs = DMatrix::from_fn(n, covariates.len(), |i, j| rows[i][covariates[j]]);
    let response = y_col.map(|c| DVector::from_fn(n, |i, _| rows[i][c]));
    Dataset::new(covariates.iter().map(|&j| header[j].clone()).collect(), obs, response)
}

/// The shipped 27-patient Cushing's syndrome data: two urinary metabolite
/// excretion rates and `y = 1` for bilateral hyperplasia.
pub fn cushings() -> Dataset {
    parse_csv(include_str!("../data/cushings_binary.csv").as_bytes()).expect("shipped dataset parses")
}

/// Local posterior information every approximation consumes.
#[derive(Debug, Clone)]
pub struct PosteriorGeometry {
    /// Posterior mode θ̃.
    pub map: DVector<f64>,
    /// Maximum-likelihood estimate θ̂.
    pub mle: DVector<f64>,
    /// `j(θ̂) = -ℓ''(θ̂)`.
    pub obs_info_mle: DMatrix<f64>,
    /// `-ℓ''(θ̃)`.
    pub obs_info_map: DMatrix<f64>,
    /// `-(ℓ + log π)''(θ̃)`.
    pub post_info_map: DMatrix<f64>,
    pub third_loglik_map: Tensor3,
    pub third_logpost_map: Tensor3,
    pub n: usize,
}

impl PosteriorGeometry {
    pub fn dim(&self) -> usize {
        self.map.len()
    }

    pub fn info_map(&self, source: DerivativeSource) -> &DMatrix<f64> {
        match source {
            DerivativeSource::LogLikelihood => &self.obs_info_map,
            DerivativeSource::LogPosterior => &self.post_info_map,
        }
    }

    pub fn third_map(&self, source: DerivativeSource) -> &Tensor3 {
        match source {
            DerivativeSource::LogLikelihood => &self.third_loglik_map,
            DerivativeSource::LogPosterior => &self.third_logpost_map,
        }
    }
}

fn require_pd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.clone().cholesky().is_none() {
        return Err(BdmError::LinearAlgebra(format!("{what} is not positive definite")));
    }
    Ok(())
}

/// Finds θ̂ and θ̃ and evaluates information and third derivatives.
pub fn fit_geometry(model: &ModelSpec) -> Result<PosteriorGeometry> {
    let mle = model.maximize(DerivativeSource::LogLikelihood)?;
    let map = model.maximize_from(DerivativeSource::LogPosterior, mle.as_slice())?;
    let obs_info_mle = -model.loglik_grad_hess(mle.as_slice())?.1;
    let obs_info_map = -model.loglik_grad_hess(map.as_slice())?.1;
    let post_info_map = -model.grad_hess(DerivativeSource::LogPosterior, map.as_slice())?.1;
    require_pd(&obs_info_mle, "observed information at the MLE")?;
    require_pd(&post_info_map, "posterior information at the MAP")?;
    Ok(PosteriorGeometry {
        third_loglik_map: model.third(DerivativeSource::LogLikelihood, map.as_slice())?,
        third_logpost_map: model.third(DerivativeSource::LogPosterior, map.as_slice())?,
        map,
        mle,
        obs_info_mle,
        obs_info_map,
        post_info_map,
        n: model.n,
    })
}

/// `1 - 2·min(F, 1 - F)`.
pub fn bdm_from_cdf(f: f64) -> f64 {
    1.0 - 2.0 * f.min(1.0 - f)
}

/// Posterior CDF `P(θ ≤ θ₀ | y)` of the Jeffreys-prior exponential model
/// (an inverse gamma with shape `n` and scale `t_n`).
pub fn exact_cdf_exponential(n: usize, mle: f64, theta0: f64) -> Result<f64> {
    if !(theta0 > 0.0) {
        return Err(BdmError::Domain(format!("theta0 must be positive, got {theta0}")));
    }
    if n == 0 || !(mle > 0.0) {
        return Err(BdmError::Domain("exponential model needs n >= 1 and mle > 0".into()));
    }
    Ok(reg_gamma(n as f64, n as f64 * mle / theta0)?.1)
}

/// Exact BDM for the Jeffreys-prior exponential model.
pub fn exact_bdm_exponential(n: usize, mle: f64, theta0: f64) -> Result<f64> {
    Ok(bdm_from_cdf(exact_cdf_exponential(n, mle, theta0)?))
}

/// Outcome of the marginal quadrature oracle.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MarginalOracle {
    pub delta: f64,
    /// `P(ψ ≤ ψ₀ | y)`.
    pub cdf: f64,
    /// Change in the CDF when the Gauss–Hermite order is halved.
    pub error_estimate: f64,
}

pub const ORACLE_NODES: usize = 64;

/// Exact marginal BDM for `ψ = θ[psi_index]`: the nuisance block is integrated
/// out by Gauss–Hermite quadrature centered at the conditional mode, and the
/// resulting marginal density is integrated adaptively in ψ.
pub fn exact_marginal_bdm_quadrature(
    model: &ModelSpec,
    geom: &PosteriorGeometry,
    psi_index: usize,
    psi0: f64,
    nodes: usize,
) -> Result<MarginalOracle> {
    let d = model.dim;
    if d > 3 {
        return Err(BdmError::Unsupported(format!("marginal quadrature in {d} dimensions (max 3)")));
    }
    if psi_index >= d {
        return Err(BdmError::Dimension { expected: format!("psi_index < {d}"), got: psi_index });
    }
    let cdf = marginal_cdf(model, geom, psi_index, psi0, nodes)?;
    let coarse = if d > 1 { marginal_cdf(model, geom, psi_index, psi0, (nodes / 2).max(2))? } else { cdf };
    Ok(MarginalOracle { delta: bdm_from_cdf(cdf), cdf, error_estimate: (cdf - coarse).abs() })
}

fn marginal_cdf(model: &ModelSpec, geom: &PosteriorGeometry, k: usize, psi0: f64, nodes: usize) -> Result<f64> {
    let d = model.dim;
    let map = geom.map.as_slice();
    let lp_map = model.logpost(map);
    let cov = geom
        .post_info_map
        .clone()
        .try_inverse()
        .ok_or_else(|| BdmError::LinearAlgebra("posterior information is singular".into()))?;
    let s = cov[(k, k)].sqrt();
    let psi_map = map[k];
    let lam_map = calculus::drop_index(k, map);
    let others: Vec<usize> = (0..d).filter(|&i| i != k).collect();

    // Unnormalized marginal density at ψ, in units of the Laplace sd.
    let density = |psi: f64| -> Result<f64> {
        if d == 1 {
            return Ok((model.logpost(&[psi]) - lp_map).exp());
        }
        let start: Vec<f64> = others
            .iter()
            .zip(&lam_map)
            .map(|(&i, l)| l + cov[(i, k)] / cov[(k, k)] * (psi - psi_map))
            .collect();
        let lam_hat = model.profile(DerivativeSource::LogPosterior, k, psi, &start)?;
        let full = calculus::embed(k, psi, lam_hat.as_slice());
        let lp_hat = model.logpost(&full);
        let (_, h) = model.grad_hess(DerivativeSource::LogPosterior, &full)?;
        let h_ll = DMatrix::from_fn(d - 1, d - 1, |a, b| -h[(others[a], others[b])]);
        let sigma = h_ll
            .try_inverse()
            .ok_or_else(|| BdmError::LinearAlgebra("conditional information is singular".into()))?;
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| BdmError::LinearAlgebra("conditional covariance is not positive definite".into()))?;
        let l_inv = chol.l().try_inverse().expect("triangular factor of a PD matrix is invertible");
        let ratio = |lam: &[f64]| {
            let z = &l_inv * (DVector::from_column_slice(lam) - &lam_hat);
            let lp = model.logpost(&calculus::embed(k, psi, lam));
            if lp == f64::NEG_INFINITY {
                0.0
            } else {
                (lp - lp_hat + 0.5 * z.norm_squared()).exp()
            }
        };
        let e = calculus::integrate_gh(&ratio, &lam_hat, &sigma, nodes)?;
        Ok((lp_hat - lp_map).exp() * sigma.determinant().sqrt() * e)
    };

    let failure = std::cell::RefCell::new(None);
    let integrand = |u: f64| {
        match density(psi_map + s * u) {
            Ok(v) => v,
            // Far-tail failures carry no mass worth reporting.
            Err(_) if u.abs() > 40.0 => 0.0,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                0.0
            }
        }
    };
    let u0 = (psi0 - psi_map) / s;
    let lower = calculus::integrate_1d(&integrand, f64::NEG_INFINITY, u0, 1e-12)?;
    let upper = calculus::integrate_1d(&integrand, u0, f64::INFINITY, 1e-12)?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(lower / (lower + upper))
}
