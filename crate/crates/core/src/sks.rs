//! Skew-modal (SKS) approximation: a Gaussian at the posterior mode skewed by
//! a cubic built from third log-derivatives.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calculus::{integrate_1d, Tensor3};
use crate::error::{BdmError, Result};
use crate::model::{DerivativeSource, PosteriorGeometry};
use crate::specialfn::{norm_cdf, norm_pdf};
use crate::univariate::{BdmResult, Method};

const TAIL_TOL: f64 = 1e-12;

/// Scalar skew-modal fit. `h = sqrt(n)·(θ - center)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewModalFit {
    pub center: f64,
    /// `n / j(θ̃)`.
    pub omega_tilde: f64,
    /// Third log-derivative at the mode.
    pub ell3: f64,
    pub n: usize,
    pub source: DerivativeSource,
}

impl SkewModalFit {
    fn nf(&self) -> f64 {
        self.n as f64
    }

    /// Cubic skewing coefficient: `α̃(h) = coef·h³`.
    pub fn alpha_coef(&self) -> f64 {
        self.ell3 * (2.0 * PI).sqrt() / (12.0 * self.nf().powf(1.5))
    }

    pub fn h(&self, theta: f64) -> f64 {
        self.nf().sqrt() * (theta - self.center)
    }

    /// Coefficient `ℓ⁽³⁾·ω̃^{3/2} / (6 n^{3/2})` of the closed-form tail correction.
    pub fn correction_coef(&self) -> f64 {
        self.ell3 * self.omega_tilde.powf(1.5) / (6.0 * self.nf().powf(1.5))
    }
}

/// Fits the scalar skew-modal approximation. `source` picks the log density
/// whose curvature and third derivative are used; the posterior is the default.
pub fn sks_fit(geom: &PosteriorGeometry, source: DerivativeSource) -> Result<SkewModalFit> {
    if geom.dim() != 1 {
        return Err(BdmError::Dimension { expected: "d = 1".into(), got: geom.dim() });
    }
    let j = geom.info_map(source)[(0, 0)];
    if !(j > 0.0) {
        return Err(BdmError::LinearAlgebra(format!("curvature at the mode is not negative (j = {j})")));
    }
    Ok(SkewModalFit {
        center: geom.map[0],
        omega_tilde: geom.n as f64 / j,
        ell3: geom.third_map(source).get(0, 0, 0),
        n: geom.n,
        source,
    })
}

/// Density of `h`: `2φ(h; 0, ω̃)·Φ(α̃(h))`.
pub fn sks_density(fit: &SkewModalFit, h: f64) -> f64 {
    let s = fit.omega_tilde.sqrt();
    2.0 * norm_pdf(h / s) / s * norm_cdf(fit.alpha_coef() * h.powi(3))
}

/// Density in θ, `sqrt(n)·sks_density(h(θ))`.
pub fn sks_density_theta(fit: &SkewModalFit, theta: f64) -> f64 {
    fit.nf().sqrt() * sks_density(fit, fit.h(theta))
}

/// Closed-form `P(θ ≥ θ₀ | y)` from the linearized skewing factor. The value
/// is raw and may leave `[0, 1]`.
pub fn sks_tail_closed(fit: &SkewModalFit, theta0: f64) -> f64 {
    let z0 = fit.h(theta0) / fit.omega_tilde.sqrt();
    norm_cdf(-z0) + fit.correction_coef() * norm_pdf(z0) * (z0 * z0 + 2.0)
}

/// Closed-form SKS measure, clamped to `[0, 1]` with the raw value kept.
/// `sign(0) = 0`, so the measure is exactly 0 at the mode.
pub fn bdm_sks(fit: &SkewModalFit, theta0: f64) -> BdmResult {
    let h0 = fit.h(theta0);
    let z0 = h0 / fit.omega_tilde.sqrt();
    let sign = if h0 > 0.0 {
        1.0
    } else if h0 < 0.0 {
        -1.0
    } else {
        0.0
    };
    let raw = (1.0 - 2.0 * norm_cdf(-z0.abs())) - 2.0 * sign * fit.correction_coef() * norm_pdf(z0) * (z0 * z0 + 2.0);
    BdmResult::from_raw_delta(Method::Sks, vec![theta0], raw)
        .with("tail_up_raw", sks_tail_closed(fit, theta0))
        .with("h0", h0)
        .with("omega_tilde", fit.omega_tilde)
        .with("ell3", fit.ell3)
}

/// Both tails of a skew-symmetric density `2φ(z)Φ(a(z))` at `z0`.
fn skew_tails(alpha: &dyn Fn(f64) -> f64, z0: f64) -> Result<(f64, f64)> {
    let f = |z: f64| 2.0 * norm_pdf(z) * norm_cdf(alpha(z));
    let lower = integrate_1d(&f, f64::NEG_INFINITY, z0, TAIL_TOL)?;
    let upper = integrate_1d(&f, z0, f64::INFINITY, TAIL_TOL)?;
    Ok((lower, upper))
}

/// `P(θ ≥ θ₀ | y)` by quadrature of [`sks_density`].
pub fn sks_tail_numeric(fit: &SkewModalFit, theta0: f64) -> Result<f64> {
    Ok(sks_tails_numeric(fit, theta0)?.1)
}

fn sks_tails_numeric(fit: &SkewModalFit, theta0: f64) -> Result<(f64, f64)> {
    let s = fit.omega_tilde.sqrt();
    let c = fit.alpha_coef() * s.powi(3);
    skew_tails(&|z| c * z.powi(3), fit.h(theta0) / s)
}

/// SKS measure from the numerically integrated density.
pub fn bdm_sks_numeric(fit: &SkewModalFit, theta0: f64) -> Result<BdmResult> {
    let (lower, upper) = sks_tails_numeric(fit, theta0)?;
    Ok(BdmResult::from_tails(Method::SksNum, vec![theta0], lower, upper)
        .with("omega_tilde", fit.omega_tilde)
        .with("ell3", fit.ell3))
}

/// Which expression supplies the marginal skewing coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VFormula {
    /// Exact marginalization of the cubic skewing term over the nuisance block.
    Marginalized,
    /// Direct index sums over `ℓ` and `Ω` without conditioning on `h₁`.
    TwoSum,
}

/// Skew-modal approximation to the marginal of one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSksFit {
    pub psi_index: usize,
    pub center: f64,
    /// `Ω = (j(θ̃)/n)⁻¹`, rows and columns permuted so ψ comes first.
    pub omega: Vec<Vec<f64>>,
    pub omega11: f64,
    /// Linear coefficient `v₁`.
    pub v11: f64,
    /// Cubic coefficient `v₃`.
    pub v3111: f64,
    pub n: usize,
    pub formula: VFormula,
}

impl MarginalSksFit {
    pub fn alpha(&self, h: f64) -> f64 {
        (2.0 * PI).sqrt() / (12.0 * (self.n as f64).powf(1.5)) * (self.v11 * h + self.v3111 * h.powi(3))
    }
}

fn psi_first(d: usize, k: usize) -> Vec<usize> {
    std::iter::once(k).chain((0..d).filter(|&i| i != k)).collect()
}

/// Marginal SKS coefficients for `ψ = θ[psi_index]`.
pub fn marginal_sks_fit(
    geom: &PosteriorGeometry,
    psi_index: usize,
    source: DerivativeSource,
    formula: VFormula,
) -> Result<MarginalSksFit> {
    let d = geom.dim();
    if d < 2 {
        return Err(BdmError::Dimension { expected: "d >= 2".into(), got: d });
    }
    if psi_index >= d {
        return Err(BdmError::Dimension { expected: format!("psi_index < {d}"), got: psi_index });
    }
    let third = geom.third_map(source);
    if third.dim() != d {
        return Err(BdmError::Capability("full third-derivative tensor unavailable".into()));
    }
    let perm = psi_first(d, psi_index);
    let info = geom.info_map(source);
    let scaled = DMatrix::from_fn(d, d, |a, b| info[(perm[a], perm[b])] / geom.n as f64);
    let omega = scaled
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| BdmError::LinearAlgebra("scaled information is not positive definite".into()))?;
    let l = third.permuted(&perm);
    let (v1, v3) = match formula {
        VFormula::Marginalized => marginalized_v(&l, &omega),
        VFormula::TwoSum => two_sum_v(&l, &omega),
    };
    Ok(MarginalSksFit {
        psi_index,
        center: geom.map[psi_index],
        omega: (0..d).map(|a| (0..d).map(|b| omega[(a, b)]).collect()).collect(),
        omega11: omega[(0, 0)],
        v11: v1,
        v3111: v3,
        n: geom.n,
        formula,
    })
}

/// `E[Σ ℓ_stl h_s h_t h_l | h₁] = v₃h₁³ + v₁h₁` for `h ~ N(0, Ω)`.
fn marginalized_v(l: &Tensor3, omega: &DMatrix<f64>) -> (f64, f64) {
    let d = l.dim();
    let o11 = omega[(0, 0)];
    let o1 = DVector::from_fn(d, |i, _| omega[(i, 0)]);
    let cond = omega - &o1 * o1.transpose() / o11;
    let (mut v1, mut v3) = (0.0, 0.0);
    for s in 0..d {
        for t in 0..d {
            for u in 0..d {
                let lv = l.get(s, t, u);
                v3 += lv * o1[s] * o1[t] * o1[u];
                v1 += lv * o1[s] * cond[(t, u)];
            }
        }
    }
    (3.0 * v1 / o11, v3 / o11.powi(3))
}

fn two_sum_v(l: &Tensor3, om: &DMatrix<f64>) -> (f64, f64) {
    let d = l.dim();
    let mut v1 = 0.0;
    let mut v3 = l.get(0, 0, 0);
    for i in 0..d {
        v3 += 3.0 * l.get(0, 0, i) * om[(i, 0)];
        for j in 0..d {
            v1 += 3.0 * l.get(0, i, j) * om[(i, j)];
            v3 += 3.0 * l.get(0, i, j) * om[(i, j)] * om[(j, 0)];
            for k in 0..d {
                v1 += 3.0 * l.get(i, j, k) * om[(i, j)] * om[(k, 0)];
                v3 += l.get(i, j, k) * om[(i, j)] * om[(k, 0)] * om[(0, 0)];
            }
        }
    }
    (v1, v3)
}

/// Both tails of the marginal SKS density at `psi0`.
pub fn marginal_sks_tails(fit: &MarginalSksFit, psi0: f64) -> Result<(f64, f64)> {
    let s = fit.omega11.sqrt();
    let z0 = (fit.n as f64).sqrt() * (psi0 - fit.center) / s;
    skew_tails(&|z| fit.alpha(s * z), z0)
}

/// Marginal SKS measure with numerically integrated tails.
pub fn bdm_marginal_sks(fit: &MarginalSksFit, psi0: f64) -> Result<BdmResult> {
    let (lower, upper) = marginal_sks_tails(fit, psi0)?;
    Ok(BdmResult::from_tails(Method::Sks, vec![psi0], lower, upper)
        .with("psi_index", fit.psi_index as f64)
        .with("omega11", fit.omega11)
        .with("v11", fit.v11)
        .with("v3111", fit.v3111))
}

/// Joint skew-modal density of `h = sqrt(n)(θ - θ̃)`:
/// `2φ_d(h; 0, Ω)·Φ(√(2π)/(12 n^{3/2})·Σ ℓ_stl h_s h_t h_l)`.
pub fn sks_joint_density(geom: &PosteriorGeometry, source: DerivativeSource, h: &[f64]) -> Result<f64> {
    let d = geom.dim();
    let n = geom.n as f64;
    let prec = geom.info_map(source) / n;
    let chol = prec
        .clone()
        .cholesky()
        .ok_or_else(|| BdmError::LinearAlgebra("scaled information is not positive definite".into()))?;
    let hv = DVector::from_column_slice(h);
    let quad = (hv.transpose() * &prec * &hv)[(0, 0)];
    let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    let phi = (-0.5 * quad + logdet - 0.5 * d as f64 * (2.0 * PI).ln()).exp();
    let l = geom.third_map(source);
    let mut cubic = 0.0;
    for s in 0..d {
        for t in 0..d {
            for u in 0..d {
                cubic += l.get(s, t, u) * h[s] * h[t] * h[u];
            }
        }
    }
    Ok(2.0 * phi * norm_cdf((2.0 * PI).sqrt() / (12.0 * n.powf(1.5)) * cubic))
}
