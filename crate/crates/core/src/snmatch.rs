//! Skew-normal approximation by derivative matching at the posterior mode.
//!
//! The matching equations are solved for the raw shape `a` of the density
//! `2φ_d(x - ξ; Ω)·Φ(aᵀ(x - ξ))`; [`SnParams`] stores the usual shape
//! `α = ω ⊙ a` with `ω = sqrt(diag Ω)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calculus;
use crate::error::{BdmError, Result};
use crate::model::{DerivativeSource, PosteriorGeometry};
use crate::specialfn::{log_norm_cdf, sn_cdf, zeta_all};
use crate::univariate::{BdmResult, Method};

/// Parameters of `SN_d(ξ, Ω, α)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "SnParamsJson", try_from = "SnParamsJson")]
pub struct SnParams {
    pub xi: DVector<f64>,
    pub omega: DMatrix<f64>,
    pub alpha: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct SnParamsJson {
    xi: Vec<f64>,
    omega: Vec<Vec<f64>>,
    alpha: Vec<f64>,
}

impl From<SnParams> for SnParamsJson {
    fn from(p: SnParams) -> Self {
        let d = p.dim();
        SnParamsJson {
            xi: p.xi.as_slice().to_vec(),
            omega: (0..d).map(|i| (0..d).map(|j| p.omega[(i, j)]).collect()).collect(),
            alpha: p.alpha.as_slice().to_vec(),
        }
    }
}

impl TryFrom<SnParamsJson> for SnParams {
    type Error = BdmError;

    fn try_from(j: SnParamsJson) -> Result<Self> {
        let d = j.xi.len();
        if j.omega.len() != d || j.omega.iter().any(|r| r.len() != d) {
            return Err(BdmError::Schema(format!("omega must be {d}x{d}")));
        }
        let omega = DMatrix::from_fn(d, d, |a, b| j.omega[a][b]);
        SnParams::new(DVector::from_vec(j.xi), omega, DVector::from_vec(j.alpha))
    }
}

impl SnParams {
    pub fn new(xi: DVector<f64>, omega: DMatrix<f64>, alpha: DVector<f64>) -> Result<Self> {
        let d = xi.len();
        if d == 0 {
            return Err(BdmError::Schema("skew-normal dimension must be >= 1".into()));
        }
        if omega.nrows() != d || omega.ncols() != d {
            return Err(BdmError::Dimension { expected: format!("{d}x{d} scale matrix"), got: omega.nrows() });
        }
        if alpha.len() != d {
            return Err(BdmError::Dimension { expected: format!("{d} shape entries"), got: alpha.len() });
        }
        if xi.iter().chain(omega.iter()).chain(alpha.iter()).any(|v| !v.is_finite()) {
            return Err(BdmError::Domain("skew-normal parameters must be finite".into()));
        }
        if (&omega - omega.transpose()).amax() > 1e-10 * omega.amax() {
            return Err(BdmError::Domain("scale matrix must be symmetric".into()));
        }
        if omega.clone().cholesky().is_none() {
            return Err(BdmError::Domain("scale matrix must be positive definite".into()));
        }
        Ok(SnParams { xi, omega, alpha })
    }

    /// Builds from the raw shape `a` (acting on unscaled residuals).
    pub fn from_raw(xi: DVector<f64>, omega: DMatrix<f64>, raw_alpha: &DVector<f64>) -> Result<Self> {
        let w = scales(&omega);
        let alpha = raw_alpha.component_mul(&w);
        SnParams::new(xi, omega, alpha)
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    /// `ω = sqrt(diag Ω)`.
    pub fn scales(&self) -> DVector<f64> {
        scales(&self.omega)
    }

    /// Raw shape `a = α / ω`.
    pub fn alpha_raw(&self) -> DVector<f64> {
        self.alpha.component_div(&self.scales())
    }

    /// `Ω̄`, the correlation matrix of `Ω`.
    pub fn correlation(&self) -> DMatrix<f64> {
        let w = self.scales();
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| self.omega[(i, j)] / (w[i] * w[j]))
    }

    /// `δ̄ = Ω̄α / sqrt(1 + αᵀΩ̄α)` (correlation scale).
    pub fn delta_bar(&self) -> DVector<f64> {
        let c = self.correlation();
        let ca = &c * &self.alpha;
        ca / (1.0 + self.alpha.dot(&(&c * &self.alpha))).sqrt()
    }

    /// `δ = Ωa / sqrt(1 + aᵀΩa)` on the original scale (`= ω ⊙ δ̄`).
    pub fn delta(&self) -> DVector<f64> {
        self.delta_bar().component_mul(&self.scales())
    }

    pub fn mean(&self) -> DVector<f64> {
        &self.xi + self.delta() * (2.0 / PI).sqrt()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let dl = self.delta();
        &self.omega - &dl * dl.transpose() * (2.0 / PI)
    }
}

fn scales(omega: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(omega.nrows(), |i, _| omega[(i, i)].sqrt())
}

/// `log 2 + log φ_d(x - ξ; Ω) + log Φ(αᵀω⁻¹(x - ξ))`.
pub fn sn_logpdf(params: &SnParams, x: &[f64]) -> Result<f64> {
    let d = params.dim();
    if x.len() != d {
        return Err(BdmError::Dimension { expected: format!("{d} coordinates"), got: x.len() });
    }
    let chol = params
        .omega
        .clone()
        .cholesky()
        .ok_or_else(|| BdmError::LinearAlgebra("scale matrix is not positive definite".into()))?;
    let r = DVector::from_column_slice(x) - &params.xi;
    let z = chol.l().solve_lower_triangular(&r).expect("Cholesky factor is nonsingular");
    let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    let arg = params.alpha_raw().dot(&r);
    Ok(std::f64::consts::LN_2 - 0.5 * z.norm_squared() - logdet - 0.5 * d as f64 * (2.0 * PI).ln() + log_norm_cdf(arg))
}

/// Mode, negative Hessian and unmixed third derivatives to match.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchInputs {
    pub m: DVector<f64>,
    pub h: DMatrix<f64>,
    pub t: DVector<f64>,
}

impl MatchInputs {
    pub fn new(m: DVector<f64>, h: DMatrix<f64>, t: DVector<f64>) -> Result<Self> {
        let d = m.len();
        if h.nrows() != d || h.ncols() != d || t.len() != d {
            return Err(BdmError::Dimension { expected: format!("inputs of dimension {d}"), got: t.len() });
        }
        if h.clone().cholesky().is_none() {
            return Err(BdmError::Domain("negative Hessian at the mode must be positive definite".into()));
        }
        Ok(MatchInputs { m, h, t })
    }

    /// Mode, curvature and unmixed third derivatives of a fitted geometry.
    pub fn from_geometry(geom: &PosteriorGeometry, source: DerivativeSource) -> Result<Self> {
        MatchInputs::new(geom.map.clone(), geom.info_map(source).clone(), geom.third_map(source).diagonal())
    }
}

/// Result of [`sn_fit`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnMatch {
    pub params: SnParams,
    pub kappa: f64,
    /// Bracket that held the root of `g`.
    pub bracket: (f64, f64),
    /// True when 20 samples of `g` inside the bracket change sign exactly once.
    pub unique_in_bracket: bool,
}

struct KappaState {
    alpha: DVector<f64>,
    omega: DMatrix<f64>,
    g: f64,
}

/// Raw shape and scale implied by `κ`, or `None` when `Ω(κ)⁻¹` is not positive definite.
fn at_kappa(inp: &MatchInputs, kappa: f64) -> Option<KappaState> {
    let [z1, z2, z3] = zeta_all(kappa);
    if z3 == 0.0 {
        return None;
    }
    let alpha = inp.t.map(|ti| (ti / z3).cbrt());
    let prec = &inp.h + z2 * &alpha * alpha.transpose();
    let omega = prec.cholesky()?.inverse();
    let g = kappa - z1 * alpha.dot(&(&omega * &alpha));
    g.is_finite().then_some(KappaState { alpha, omega, g })
}

const KAPPA_MIN: f64 = -50.0;
const KAPPA_MAX: f64 = 50.0;
const KAPPA_STEPS: usize = 4000;

/// Fits `SN_d(ξ, Ω, α)` whose mode, negative Hessian at the mode and unmixed
/// third log-derivatives equal `inputs`. The residual
/// `g(κ) = κ - ζ₁(κ)·aᵀΩa` is scanned on `[-50, 50]`; the first upward sign
/// change with feasible ends is refined by Brent's method.
pub fn sn_fit(inputs: &MatchInputs) -> Result<SnMatch> {
    let d = inputs.m.len();
    if inputs.t.iter().all(|&v| v == 0.0) {
        let omega = inputs
            .h
            .clone()
            .cholesky()
            .ok_or_else(|| BdmError::LinearAlgebra("negative Hessian is not positive definite".into()))?
            .inverse();
        let params = SnParams::new(inputs.m.clone(), omega, DVector::zeros(d))?;
        return Ok(SnMatch { params, kappa: 0.0, bracket: (0.0, 0.0), unique_in_bracket: true });
    }
    let step = (KAPPA_MAX - KAPPA_MIN) / KAPPA_STEPS as f64;
    let grid: Vec<(f64, Option<f64>)> = (0..=KAPPA_STEPS)
        .map(|i| {
            let k = KAPPA_MIN + i as f64 * step;
            (k, at_kappa(inputs, k).map(|s| s.g))
        })
        .collect();
    let mut infeasible_crossing = None;
    let mut bracket = None;
    for w in grid.windows(2) {
        match (w[0].1, w[1].1) {
            (Some(a), Some(b)) if a < 0.0 && b >= 0.0 => {
                bracket = Some((w[0].0, w[1].0));
                break;
            }
            (None, Some(b)) if b >= 0.0 && infeasible_crossing.is_none() => infeasible_crossing = Some(w[1].0),
            _ => {}
        }
    }
    let (lo, hi) = match bracket {
        Some(b) => b,
        None => {
            if let Some(kappa) = infeasible_crossing {
                return Err(BdmError::InfeasibleMatch { kappa });
            }
            let sign = |v: Option<f64>| v.map(f64::signum).unwrap_or(f64::NAN);
            return Err(BdmError::NoSolution {
                lo: KAPPA_MIN,
                hi: KAPPA_MAX,
                sign_lo: sign(grid[0].1),
                sign_hi: sign(grid[KAPPA_STEPS].1),
            });
        }
    };
    let g = |k: f64| at_kappa(inputs, k).map(|s| s.g).unwrap_or(f64::NAN);
    let kappa = calculus::brent(&g, lo, hi, 1e-14)?;
    let state = at_kappa(inputs, kappa).ok_or(BdmError::InfeasibleMatch { kappa })?;
    let [z1, _, _] = zeta_all(kappa);
    let xi = &inputs.m - z1 * &state.omega * &state.alpha;
    let omega = 0.5 * (&state.omega + state.omega.transpose());
    let params = SnParams::from_raw(xi, omega, &state.alpha)?;

    let samples: Vec<f64> = (0..20).map(|i| g(lo + (hi - lo) * i as f64 / 19.0)).collect();
    let changes = samples.windows(2).filter(|w| w[0].signum() != w[1].signum() && w[1] != 0.0).count();
    Ok(SnMatch { params, kappa, bracket: (lo, hi), unique_in_bracket: changes <= 1 })
}

/// Analytic gradient, negative Hessian and unmixed third derivatives of
/// [`sn_logpdf`] at `x`.
pub fn sn_derivatives(params: &SnParams, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let a = params.alpha_raw();
    let prec = params.omega.clone().cholesky().expect("validated scale").inverse();
    let r = x - &params.xi;
    let [z1, z2, z3] = zeta_all(a.dot(&r));
    let grad = -&prec * &r + z1 * &a;
    let neg_hess = &prec - z2 * &a * a.transpose();
    let third = a.map(|v| z3 * v.powi(3));
    (grad, neg_hess, third)
}

/// Skew-normal parameters of the marginal of the coordinates in `keep`.
pub fn sn_marginal(params: &SnParams, keep: &[usize]) -> Result<SnParams> {
    let d = params.dim();
    if keep.is_empty() || keep.iter().any(|&i| i >= d) {
        return Err(BdmError::Dimension { expected: format!("nonempty indices < {d}"), got: keep.len() });
    }
    let k = keep.len();
    let xi = DVector::from_fn(k, |a, _| params.xi[keep[a]]);
    let omega = DMatrix::from_fn(k, k, |a, b| params.omega[(keep[a], keep[b])]);
    let corr = params.correlation();
    let c11 = DMatrix::from_fn(k, k, |a, b| corr[(keep[a], keep[b])]);
    let db = params.delta_bar();
    let d1 = DVector::from_fn(k, |a, _| db[keep[a]]);
    let c11_inv = c11
        .cholesky()
        .ok_or_else(|| BdmError::LinearAlgebra("marginal correlation block is singular".into()))?
        .inverse();
    let v = &c11_inv * &d1;
    let denom = 1.0 - d1.dot(&v);
    if !(denom > 0.0) {
        return Err(BdmError::LinearAlgebra("marginal shape is unbounded".into()));
    }
    SnParams::new(xi, omega, v / denom.sqrt())
}

/// `|2F(θ₀) - 1|` for a univariate skew-normal.
pub fn bdm_sn_univariate(params: &SnParams, theta0: f64) -> Result<BdmResult> {
    if params.dim() != 1 {
        return Err(BdmError::Dimension { expected: "d = 1".into(), got: params.dim() });
    }
    let (xi, om, al) = (params.xi[0], params.omega[(0, 0)], params.alpha[0]);
    let lower = sn_cdf(theta0, xi, om, al)?;
    // upper tail through the reflection -X ~ SN(-ξ, Ω, -α)
    let upper = sn_cdf(-theta0, -xi, om, -al)?;
    Ok(BdmResult::from_tails(Method::Sn, vec![theta0], lower, upper)
        .with("xi", xi)
        .with("omega", om)
        .with("alpha", al))
}

/// Draws from `SN_d` via `X = ξ + δ|W₀| + Z`, `Z ~ N(0, Ω - δδᵀ)`.
pub fn sn_sample<R: Rng>(params: &SnParams, rng: &mut R, n: usize) -> Result<Vec<DVector<f64>>> {
    let d = params.dim();
    let dl = params.delta();
    let cov = &params.omega - &dl * dl.transpose();
    let l = cov
        .cholesky()
        .ok_or_else(|| BdmError::LinearAlgebra("conditional covariance is not positive definite".into()))?
        .l();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w0: f64 = rng.sample::<f64, _>(StandardNormal).abs();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        out.push(&params.xi + &dl * w0 + &l * z);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specialfn::{norm_cdf, norm_pdf};

    #[test]
    fn symmetric_case() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let inp = MatchInputs::new(DVector::from_vec(vec![0.5, -1.0]), h.clone(), DVector::zeros(2)).unwrap();
        let fit = sn_fit(&inp).unwrap();
        assert_eq!(fit.kappa, 0.0);
        assert_eq!(fit.params.xi, inp.m);
        assert!((fit.params.omega.clone() * h - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn univariate_density() {
        let p = SnParams::new(DVector::from_vec(vec![0.0]), DMatrix::from_element(1, 1, 1.0), DVector::from_vec(vec![2.5])).unwrap();
        for &x in &[-1.3, 0.0, 0.7] {
            let direct = (2.0 * norm_pdf(x) * norm_cdf(2.5 * x)).ln();
            assert!((sn_logpdf(&p, &[x]).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_satisfies_matching_equations() {
        let m = DVector::from_vec(vec![1.0, -0.5]);
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let t = DVector::from_vec(vec![2.0, -0.7]);
        let fit = sn_fit(&MatchInputs::new(m.clone(), h.clone(), t.clone()).unwrap()).unwrap();
        let (g, nh, th) = sn_derivatives(&fit.params, &m);
        assert!(g.amax() < 1e-10);
        assert!((nh - h).amax() < 1e-10);
        assert!((th - t).amax() < 1e-10);
        assert!(fit.unique_in_bracket);
    }

    #[test]
    fn marginal_formulas_agree() {
        let omega = DMatrix::from_row_slice(3, 3, &[2.0, 0.4, -0.3, 0.4, 1.0, 0.2, -0.3, 0.2, 0.5]);
        let p = SnParams::new(DVector::from_vec(vec![0.1, 0.2, 0.3]), omega, DVector::from_vec(vec![1.5, -2.0, 0.7])).unwrap();
        let m = sn_marginal(&p, &[0]).unwrap();
        // shape through the conditional-correlation route
        let c = p.correlation();
        let a = &p.alpha;
        let c22 = c.view((1, 1), (2, 2)).into_owned();
        let c21 = c.view((1, 0), (2, 1)).into_owned();
        let cond = &c22 - &c21 * c21.transpose();
        let a2 = DVector::from_vec(vec![a[1], a[2]]);
        let num = a[0] + (c21.transpose() * &a2)[(0, 0)];
        let den = (1.0 + a2.dot(&(&cond * &a2))).sqrt();
        assert!((m.alpha[0] - num / den).abs() < 1e-12);
        let all = sn_marginal(&p, &[0, 1, 2]).unwrap();
        assert!((all.alpha - &p.alpha).amax() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let p = SnParams::new(DVector::from_vec(vec![0.1, 0.2]), DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]), DVector::from_vec(vec![1.0, -1.0])).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.starts_with("{\"xi\":[0.1,0.2],\"omega\":[[1.0,0.2],[0.2,0.5]]"));
        let back: SnParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<SnParams>("{\"xi\":[0],\"omega\":[[-1]],\"alpha\":[0]}").is_err());
    }

    #[test]
    fn median_has_zero_measure() {
        let p = SnParams::new(DVector::from_vec(vec![0.3]), DMatrix::from_element(1, 1, 0.8), DVector::from_vec(vec![3.0])).unwrap();
        let med = crate::specialfn::sn_quantile(0.5, 0.3, 0.8, 3.0).unwrap();
        assert!(bdm_sn_univariate(&p, med).unwrap().delta() < 1e-9);
    }
}
