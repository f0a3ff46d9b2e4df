//! First-order and third-order (r*) discrepancy measures for scalar
//! parameters, with and without nuisance parameters, and the multivariate
//! chi-squared forms.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calculus;
use crate::error::{BdmError, Result};
use crate::model::{self, DerivativeSource, ModelSpec, PosteriorGeometry};
use crate::specialfn::{chi2_cdf, norm_cdf, norm_quantile, Probability};

/// Approximation used to produce a [`BdmResult`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Io,
    Ho,
    Sks,
    SksNum,
    Sn,
    Wald,
    Exact,
}

impl Method {
    pub const ALL: [Method; 7] =
        [Method::Io, Method::Ho, Method::Sks, Method::SksNum, Method::Sn, Method::Wald, Method::Exact];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Io => "io",
            Method::Ho => "ho",
            Method::Sks => "sks",
            Method::SksNum => "sks-num",
            Method::Sn => "sn",
            Method::Wald => "wald",
            Method::Exact => "exact",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| BdmError::Domain(format!("unknown method '{s}'")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A discrepancy value with the tail it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdmResult {
    pub method: Method,
    pub theta0: Vec<f64>,
    pub delta: Probability,
    /// `P(θ ≤ θ₀ | y)` under the approximation, when it has one.
    pub tail_low: Option<Probability>,
    pub clamped: bool,
    pub diagnostics: BTreeMap<String, f64>,
}

impl BdmResult {
    /// From both tails, each computed without cancellation.
    pub fn from_tails(method: Method, theta0: Vec<f64>, lower: f64, upper: f64) -> Self {
        let delta = 1.0 - 2.0 * lower.min(upper);
        BdmResult {
            method,
            theta0,
            delta: Probability::saturating(delta),
            tail_low: Some(Probability::saturating(lower)),
            clamped: false,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn from_cdf(method: Method, theta0: Vec<f64>, cdf: f64) -> Self {
        Self::from_tails(method, theta0, cdf, 1.0 - cdf)
    }

    /// A raw value that may leave `[0, 1]`; it is clamped and kept as `delta_raw`.
    pub fn from_raw_delta(method: Method, theta0: Vec<f64>, raw: f64) -> Self {
        let clamped = !(0.0..=1.0).contains(&raw);
        let mut r = BdmResult {
            method,
            theta0,
            delta: Probability::saturating(raw),
            tail_low: None,
            clamped,
            diagnostics: BTreeMap::new(),
        };
        r.diagnostics.insert("delta_raw".into(), raw);
        r.diagnostics.insert("clamped".into(), if clamped { 1.0 } else { 0.0 });
        r
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }

    pub fn delta(&self) -> f64 {
        self.delta.value()
    }
}

fn require_dim(geom: &PosteriorGeometry, want: usize) -> Result<()> {
    if geom.dim() != want {
        return Err(BdmError::Dimension { expected: format!("d = {want}"), got: geom.dim() });
    }
    Ok(())
}

fn require_nuisance(model: &ModelSpec, psi_index: usize) -> Result<()> {
    if model.dim < 2 {
        return Err(BdmError::Dimension { expected: "d >= 2".into(), got: model.dim });
    }
    if psi_index >= model.dim {
        return Err(BdmError::Dimension { expected: format!("psi_index < {}", model.dim), got: psi_index });
    }
    Ok(())
}

fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| BdmError::LinearAlgebra(format!("{what} is not positive definite")))
}

/// Normal tails for the standardized distance `z = (θ₀ - center)·sqrt(info)`.
fn normal_result(method: Method, theta0: Vec<f64>, z: f64) -> BdmResult {
    BdmResult::from_tails(method, theta0, norm_cdf(z), norm_cdf(-z)).with("z", z)
}

/// First-order BDM `2Φ(|θ₀ - θ̂|·sqrt(j(θ̂))) - 1`.
pub fn bdm_io(geom: &PosteriorGeometry, theta0: f64) -> Result<BdmResult> {
    require_dim(geom, 1)?;
    let j = geom.obs_info_mle[(0, 0)];
    Ok(normal_result(Method::Io, vec![theta0], (theta0 - geom.mle[0]) * j.sqrt()))
}

/// `j_p(ψ̂) = 1 / [j(θ̂)⁻¹]_ψψ`.
pub fn profile_information(geom: &PosteriorGeometry, psi_index: usize) -> Result<f64> {
    Ok(1.0 / inverse(&geom.obs_info_mle, "observed information")?[(psi_index, psi_index)])
}

/// Profile log-likelihood `ℓ_p(ψ)` and the constrained maximizer `λ̂_ψ`.
pub fn profile_loglik(model: &ModelSpec, geom: &PosteriorGeometry, psi_index: usize, psi: f64) -> Result<(f64, DVector<f64>)> {
    let start = calculus::drop_index(psi_index, geom.mle.as_slice());
    let lam = model.profile(DerivativeSource::LogLikelihood, psi_index, psi, &start)?;
    let full = calculus::embed(psi_index, psi, lam.as_slice());
    Ok((model.loglik(&full), lam))
}

/// `-ℓ_p''(ψ̂)` by central differences of the profile log-likelihood.
pub fn profile_curvature_fd(model: &ModelSpec, geom: &PosteriorGeometry, psi_index: usize) -> Result<f64> {
    let psi_hat = geom.mle[psi_index];
    let h = f64::EPSILON.powf(0.25) * psi_hat.abs().max(1.0);
    let (up, _) = profile_loglik(model, geom, psi_index, psi_hat + h)?;
    let (dn, _) = profile_loglik(model, geom, psi_index, psi_hat - h)?;
    let mid = model.loglik(geom.mle.as_slice());
    Ok(-(up - 2.0 * mid + dn) / (h * h))
}

/// Profile first-order BDM `2Φ(|ψ₀ - ψ̂|·sqrt(j_p(ψ̂))) - 1`.
pub fn bdm_io_profile(model: &ModelSpec, geom: &PosteriorGeometry, psi_index: usize, psi0: f64) -> Result<BdmResult> {
    require_nuisance(model, psi_index)?;
    let jp = profile_information(geom, psi_index)?;
    let jp_fd = profile_curvature_fd(model, geom, psi_index)?;
    Ok(normal_result(Method::Io, vec![psi0], (psi0 - geom.mle[psi_index]) * jp.sqrt())
        .with("psi_index", psi_index as f64)
        .with("jp", jp)
        .with("jp_fd", jp_fd))
}

/// How the `q` correction treats the prior in the scalar case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    /// `q = ℓ'(θ₀)·j(θ̂)^(-1/2)·π(θ̂)/π(θ₀)`.
    General,
    /// `q = ℓ'(θ₀)·j(θ̂)^(-1/2)·sqrt(i(θ̂)/i(θ₀))`.
    Jeffreys,
}

/// Half-width of the band around the MLE where `r*` is bridged.
pub const GUARD_R: f64 = 1e-4;
const BRIDGE_R: [f64; 4] = [-2e-2, -1e-2, 1e-2, 2e-2];

/// `r`, `q` and `r* = r + log(q/r)/r` at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RstarEval {
    pub r: f64,
    pub q: f64,
    pub rstar: f64,
    /// True when `|r| < GUARD_R` and `rstar` comes from the cubic bridge.
    pub bridged: bool,
    /// True when `i(θ)` was replaced by observed information.
    pub observed_info_fallback: bool,
}

struct RootParts {
    r: f64,
    q: f64,
    fallback: bool,
}

/// Evaluates `r*` at `psi0`, bridging the removable singularity at `r = 0` by a
/// cubic in `r` through the points where `r = ±0.01, ±0.02`.
fn rstar_bridged(parts: &dyn Fn(f64) -> Result<RootParts>, psi_hat: f64, sd: f64, psi0: f64) -> Result<RstarEval> {
    let p0 = parts(psi0)?;
    if p0.r.abs() >= GUARD_R {
        let rstar = p0.r + (p0.q / p0.r).ln() / p0.r;
        if !rstar.is_finite() {
            return Err(BdmError::Evaluation { point: vec![psi0] });
        }
        return Ok(RstarEval { r: p0.r, q: p0.q, rstar, bridged: false, observed_info_fallback: p0.fallback });
    }
    let mut rs = [0.0; 4];
    let mut vals = [0.0; 4];
    for (k, &target) in BRIDGE_R.iter().enumerate() {
        // r decreases through 0 at ψ̂, so r = target lies on the side of -target.
        let g = |psi: f64| parts(psi).map(|p| p.r - target).unwrap_or(f64::NAN);
        let step = -target.signum() * 0.5 * target.abs() * sd;
        let (lo, hi) = calculus::expand_bracket(&g, psi_hat, step, 60)?;
        let psi = calculus::brent(&g, lo, hi, 1e-15 * psi_hat.abs().max(1.0))?;
        let p = parts(psi)?;
        rs[k] = p.r;
        vals[k] = p.r + (p.q / p.r).ln() / p.r;
    }
    let x = p0.r;
    let mut rstar = 0.0;
    for i in 0..4 {
        let mut basis = 1.0;
        for j in 0..4 {
            if j != i {
                basis *= (x - rs[j]) / (rs[i] - rs[j]);
            }
        }
        rstar += basis * vals[i];
    }
    Ok(RstarEval { r: p0.r, q: p0.q, rstar, bridged: true, observed_info_fallback: p0.fallback })
}

/// `r*(θ₀)` for a scalar parameter.
pub fn rstar(model: &ModelSpec, geom: &PosteriorGeometry, theta0: f64, prior_mode: PriorMode) -> Result<RstarEval> {
    require_dim(geom, 1)?;
    let th_hat = geom.mle[0];
    let j_hat = geom.obs_info_mle[(0, 0)];
    let l_hat = model.loglik(&[th_hat]);
    let info = |t: f64| -> Result<(f64, bool)> {
        match model.expected_info(&[t]) {
            Some(i) => Ok((i[(0, 0)], false)),
            None => Ok((-model.loglik_grad_hess(&[t])?.1[(0, 0)], true)),
        }
    };
    let parts = |t: f64| -> Result<RootParts> {
        let l0 = model.loglik(&[t]);
        if !l0.is_finite() {
            return Err(BdmError::Evaluation { point: vec![t] });
        }
        let r = (th_hat - t).signum() * (2.0 * (l_hat - l0)).max(0.0).sqrt();
        let score = model.loglik_grad_hess(&[t])?.0[0];
        let (ratio, fallback) = match prior_mode {
            PriorMode::General => ((model.logprior(&[th_hat]) - model.logprior(&[t])).exp(), false),
            PriorMode::Jeffreys => {
                let (i_hat, f1) = info(th_hat)?;
                let (i_0, f2) = info(t)?;
                ((i_hat / i_0).sqrt(), f1 || f2)
            }
        };
        Ok(RootParts { r, q: score / j_hat.sqrt() * ratio, fallback })
    };
    rstar_bridged(&parts, th_hat, 1.0 / j_hat.sqrt(), theta0)
}

fn ho_result(theta0: Vec<f64>, e: RstarEval) -> BdmResult {
    let mut out = if e.bridged {
        // Inside the guard band the measure is reported as 0; the bridged
        // tail stays available in the diagnostics.
        let mut r = BdmResult::from_tails(Method::Ho, theta0, 0.5, 0.5);
        r.diagnostics.insert("delta_bridge".into(), 1.0 - 2.0 * norm_cdf(-e.rstar.abs()));
        r.diagnostics.insert("tail_low_bridge".into(), norm_cdf(-e.rstar));
        r
    } else {
        BdmResult::from_tails(Method::Ho, theta0, norm_cdf(-e.rstar), norm_cdf(e.rstar))
    };
    out.diagnostics.insert("r".into(), e.r);
    out.diagnostics.insert("q".into(), e.q);
    out.diagnostics.insert("rstar".into(), e.rstar);
    out.diagnostics.insert("bridged".into(), if e.bridged { 1.0 } else { 0.0 });
    if e.observed_info_fallback {
        out.diagnostics.insert("observed_info_fallback".into(), 1.0);
    }
    out
}

/// Third-order BDM `2Φ(|r*(θ₀)|) - 1`, with `P(θ ≥ θ₀ | y) ≐ Φ(r*)`.
pub fn bdm_ho(model: &ModelSpec, geom: &PosteriorGeometry, theta0: f64, prior_mode: PriorMode) -> Result<BdmResult> {
    Ok(ho_result(vec![theta0], rstar(model, geom, theta0, prior_mode)?))
}

fn logdet_block(m: &DMatrix<f64>, keep: &[usize]) -> Result<f64> {
    if keep.is_empty() {
        return Ok(0.0);
    }
    let sub = DMatrix::from_fn(keep.len(), keep.len(), |a, b| m[(keep[a], keep[b])]);
    let chol = sub
        .cholesky()
        .ok_or_else(|| BdmError::LinearAlgebra("nuisance information block is not positive definite".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// `r*_B(ψ₀)` built on the profile log-likelihood.
pub fn rstar_profile(model: &ModelSpec, geom: &PosteriorGeometry, psi_index: usize, psi0: f64) -> Result<RstarEval> {
    require_nuisance(model, psi_index)?;
    let k = psi_index;
    let mle = geom.mle.as_slice();
    let psi_hat = mle[k];
    let l_hat = model.loglik(mle);
    let jp = profile_information(geom, k)?;
    let others: Vec<usize> = (0..model.dim).filter(|&i| i != k).collect();
    let logdet_hat = logdet_block(&geom.obs_info_mle, &others)?;
    let lp_hat = model.logprior(mle);
    let parts = |psi: f64| -> Result<RootParts> {
        let (lp, lam) = profile_loglik(model, geom, k, psi)?;
        let full = calculus::embed(k, psi, lam.as_slice());
        let r = (psi_hat - psi).signum() * (2.0 * (l_hat - lp)).max(0.0).sqrt();
        let (g, h) = model.loglik_grad_hess(&full)?;
        let logdet_c = logdet_block(&(-h), &others)?;
        let q = g[k] / jp.sqrt() * (0.5 * (logdet_c - logdet_hat)).exp() * (lp_hat - model.logprior(&full)).exp();
        Ok(RootParts { r, q, fallback: false })
    };
    rstar_bridged(&parts, psi_hat, 1.0 / jp.sqrt(), psi0)
}

/// Third-order marginal BDM `2Φ(|r*_B(ψ₀)|) - 1`.
pub fn bdm_ho_profile(model: &ModelSpec, geom: &PosteriorGeometry, psi_index: usize, psi0: f64) -> Result<BdmResult> {
    Ok(ho_result(vec![psi0], rstar_profile(model, geom, psi_index, psi0)?).with("psi_index", psi_index as f64))
}

fn rstar_fn<'a>(
    model: &'a ModelSpec,
    geom: &'a PosteriorGeometry,
    psi_index: Option<usize>,
) -> impl Fn(f64) -> Result<f64> + 'a {
    move |x| match psi_index {
        None => rstar(model, geom, x, PriorMode::General).map(|e| e.rstar),
        Some(k) => rstar_profile(model, geom, k, x).map(|e| e.rstar),
    }
}

fn scale_of(geom: &PosteriorGeometry, psi_index: Option<usize>) -> Result<(f64, f64)> {
    match psi_index {
        None => {
            require_dim(geom, 1)?;
            Ok((geom.mle[0], 1.0 / geom.obs_info_mle[(0, 0)].sqrt()))
        }
        Some(k) => Ok((geom.mle[k], 1.0 / profile_information(geom, k)?.sqrt())),
    }
}

/// Solves `r*(x) = level` by bracketing outward from the MLE.
fn solve_rstar(model: &ModelSpec, geom: &PosteriorGeometry, psi_index: Option<usize>, level: f64) -> Result<f64> {
    let f = rstar_fn(model, geom, psi_index);
    let (center, sd) = scale_of(geom, psi_index)?;
    let g = |x: f64| f(x).map(|v| v - level).unwrap_or(f64::NAN);
    let g0 = g(center);
    if !g0.is_finite() {
        return Err(BdmError::Evaluation { point: vec![center] });
    }
    if g0.abs() < 1e-13 {
        return Ok(center);
    }
    // r* decreases in x, so the root lies to the right when g(center) > 0.
    let step = if g0 > 0.0 { sd } else { -sd };
    let (lo, hi) = calculus::expand_bracket(&g, center, step, 50)?;
    calculus::brent(&g, lo, hi, 1e-12 * center.abs().max(1.0))
}

/// Posterior median: the root of `r*` (or `r*_B` when `psi_index` is given).
pub fn posterior_median_rstar(model: &ModelSpec, geom: &PosteriorGeometry, psi_index: Option<usize>) -> Result<f64> {
    solve_rstar(model, geom, psi_index, 0.0)
}

/// Equi-tailed `(1 - alpha)` interval `{x : |r*(x)| ≤ z_{1-alpha/2}}`.
pub fn credible_interval_rstar(
    model: &ModelSpec,
    geom: &PosteriorGeometry,
    psi_index: Option<usize>,
    alpha: f64,
) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BdmError::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z = norm_quantile(1.0 - alpha / 2.0)?;
    Ok((solve_rstar(model, geom, psi_index, z)?, solve_rstar(model, geom, psi_index, -z)?))
}

/// Multivariate first-order BDM `chi2_cdf(W, |indices|)` for the coordinates in
/// `indices` (empty means all). `W` is the Wald form on the sub-block of
/// `j(θ̂)⁻¹`, or with `use_loglik_ratio` the profile likelihood ratio
/// `2(ℓ(θ̂) - ℓ(θ₀, λ̂_θ₀))`.
pub fn bdm_wald_multi(
    model: &ModelSpec,
    geom: &PosteriorGeometry,
    indices: &[usize],
    theta0: &[f64],
    use_loglik_ratio: bool,
) -> Result<BdmResult> {
    let d = geom.dim();
    let idx: Vec<usize> = if indices.is_empty() { (0..d).collect() } else { indices.to_vec() };
    if theta0.len() != idx.len() {
        return Err(BdmError::Dimension { expected: format!("{} hypothesized values", idx.len()), got: theta0.len() });
    }
    if idx.iter().any(|&i| i >= d) {
        return Err(BdmError::Dimension { expected: format!("indices < {d}"), got: *idx.iter().max().unwrap_or(&0) });
    }
    let stat = if use_loglik_ratio {
        let others: Vec<usize> = (0..d).filter(|i| !idx.contains(i)).collect();
        let full = if others.is_empty() {
            let mut t = geom.mle.as_slice().to_vec();
            for (a, &i) in idx.iter().enumerate() {
                t[i] = theta0[a];
            }
            t
        } else {
            let fix = |lam: &[f64]| {
                let mut t = vec![0.0; d];
                for (a, &i) in idx.iter().enumerate() {
                    t[i] = theta0[a];
                }
                for (a, &i) in others.iter().enumerate() {
                    t[i] = lam[a];
                }
                t
            };
            let f = |lam: &[f64]| model.loglik(&fix(lam));
            let start: Vec<f64> = others.iter().map(|&i| geom.mle[i]).collect();
            let lam = calculus::maximize(&f, &start, 1e-9)?;
            fix(lam.as_slice())
        };
        2.0 * (model.loglik(geom.mle.as_slice()) - model.loglik(&full))
    } else {
        let cov = inverse(&geom.obs_info_mle, "observed information")?;
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| cov[(idx[a], idx[b])]);
        let diff = DVector::from_fn(idx.len(), |a, _| theta0[a] - geom.mle[idx[a]]);
        let prec = inverse(&sub, "covariance sub-block")?;
        (diff.transpose() * prec * &diff)[(0, 0)]
    };
    let stat = stat.max(0.0);
    let delta = chi2_cdf(stat, idx.len())?;
    let mut r = BdmResult {
        method: Method::Wald,
        theta0: theta0.to_vec(),
        delta: Probability::saturating(delta),
        tail_low: None,
        clamped: false,
        diagnostics: BTreeMap::new(),
    };
    r.diagnostics.insert("statistic".into(), stat);
    r.diagnostics.insert("df".into(), idx.len() as f64);
    r.diagnostics.insert("loglik_ratio".into(), if use_loglik_ratio { 1.0 } else { 0.0 });
    Ok(r)
}

/// Exact BDM for the Jeffreys-prior exponential model as a [`BdmResult`].
pub fn bdm_exact_exponential(n: usize, mle: f64, theta0: f64) -> Result<BdmResult> {
    let cdf = model::exact_cdf_exponential(n, mle, theta0)?;
    let upper = crate::specialfn::reg_gamma(n as f64, n as f64 * mle / theta0)?.0;
    Ok(BdmResult::from_tails(Method::Exact, vec![theta0], cdf, upper))
}

/// Exact marginal BDM by quadrature as a [`BdmResult`].
pub fn bdm_exact_quadrature(model: &ModelSpec, geom: &PosteriorGeometry, psi_index: usize, psi0: f64) -> Result<BdmResult> {
    let o = model::exact_marginal_bdm_quadrature(model, geom, psi_index, psi0, model::ORACLE_NODES)?;
    Ok(BdmResult::from_cdf(Method::Exact, vec![psi0], o.cdf)
        .with("psi_index", psi_index as f64)
        .with("error_estimate", o.error_estimate))
}
