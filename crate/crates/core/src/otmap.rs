//! Transport map from a fitted skew-normal to the standard normal, and the
//! multivariate discrepancy `P(χ²_d ≤ ‖T(θ₀)‖²)`.
//!
//! The map is `u = V^{-1/2}(W - μ)` where `z = Qᵀ A (x - ξ)`, `Q` turns the
//! shape onto the first axis and `W` replaces `z₁` by `Φ⁻¹(F_SN(z₁))`. `A` is
//! the identity in [`Frame::Raw`] and `L⁻¹` (with `Ω = LLᵀ`) in
//! [`Frame::Whitened`]. In the whitened frame `z₂..z_d` are independent
//! standard normals, so `W` is exactly standard normal.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::calculus::integrate_1d;
use crate::error::{BdmError, Result};
use crate::snmatch::{sn_sample, SnParams};
use crate::specialfn::{chi2_cdf, chi2_quantile, norm_quantile, sn_cdf, sn_pdf, sn_quantile};
use crate::univariate::{BdmResult, Method};

/// Coordinates in which the shape is rotated onto the first axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Frame {
    /// Rotate `x - ξ` directly.
    Raw,
    /// Rotate `L⁻¹(x - ξ)`.
    #[default]
    Whitened,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtMap {
    pub frame: Frame,
    pub xi: DVector<f64>,
    /// Linear map applied to `x - ξ` before rotating.
    pub pre: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// `[QᵀAΩAᵀQ]₁₁`.
    pub omega1_sq: f64,
    /// Shape of the first rotated coordinate (scaled convention).
    pub shape1: f64,
    pub mu: DVector<f64>,
    pub v: DMatrix<f64>,
    pub v_inv_sqrt: DMatrix<f64>,
}

#[derive(Serialize)]
struct OtMapJson {
    frame: Frame,
    xi: Vec<f64>,
    pre: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    omega1_sq: f64,
    shape1: f64,
    mu: Vec<f64>,
    v: Vec<Vec<f64>>,
    v_inv_sqrt: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl Serialize for OtMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        OtMapJson {
            frame: self.frame,
            xi: self.xi.as_slice().to_vec(),
            pre: rows(&self.pre),
            q: rows(&self.q),
            omega1_sq: self.omega1_sq,
            shape1: self.shape1,
            mu: self.mu.as_slice().to_vec(),
            v: rows(&self.v),
            v_inv_sqrt: rows(&self.v_inv_sqrt),
        }
        .serialize(s)
    }
}

/// Image of a point under the map.
#[derive(Debug, Clone, PartialEq)]
pub struct OtPoint {
    pub u: DVector<f64>,
    /// The first coordinate hit the end of the representable normal quantiles.
    pub saturated: bool,
}

/// Orthogonal `Q` with first column `+a/‖a‖` (a Householder reflection).
fn align_first_axis(a: &DVector<f64>) -> DMatrix<f64> {
    let d = a.len();
    let norm = a.norm();
    if norm == 0.0 {
        return DMatrix::identity(d, d);
    }
    let mut v = -a / norm;
    v[0] += 1.0;
    let vv = v.norm_squared();
    if vv < 1e-28 {
        return DMatrix::identity(d, d);
    }
    DMatrix::identity(d, d) - (2.0 / vv) * &v * v.transpose()
}

fn inv_sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(BdmError::LinearAlgebra("transport covariance is not positive definite".into()));
    }
    let s = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let r = &eig.eigenvectors * s * eig.eigenvectors.transpose();
    Ok(0.5 * (&r + r.transpose()))
}

const P_FLOOR: f64 = 1e-300;

/// `Φ⁻¹(F_SN(z; 0, ω², s))`, from whichever tail is smaller.
fn gaussianize(z: f64, omega_sq: f64, shape: f64) -> Result<(f64, bool)> {
    let lower = sn_cdf(z, 0.0, omega_sq, shape)?;
    if lower <= 0.5 {
        let sat = lower < P_FLOOR;
        Ok((norm_quantile(lower.max(P_FLOOR))?, sat))
    } else {
        let upper = sn_cdf(-z, 0.0, omega_sq, -shape)?;
        let sat = upper < P_FLOOR;
        Ok((-norm_quantile(upper.max(P_FLOOR))?, sat))
    }
}

impl OtMap {
    pub fn build(params: &SnParams) -> Result<OtMap> {
        OtMap::build_in(params, Frame::default())
    }

    pub fn build_in(params: &SnParams, frame: Frame) -> Result<OtMap> {
        let d = params.dim();
        let pre = match frame {
            Frame::Raw => DMatrix::identity(d, d),
            Frame::Whitened => {
                let chol = params
                    .omega
                    .clone()
                    .cholesky()
                    .ok_or_else(|| BdmError::LinearAlgebra("scale matrix is not positive definite".into()))?;
                chol.l().try_inverse().ok_or_else(|| BdmError::LinearAlgebra("singular Cholesky factor".into()))?
            }
        };
        let pre_inv_t = pre
            .clone()
            .try_inverse()
            .ok_or_else(|| BdmError::LinearAlgebra("singular frame matrix".into()))?
            .transpose();
        let shape = &pre_inv_t * params.alpha_raw();
        let q = align_first_axis(&shape);
        let qa = q.transpose() * &pre;
        let om = &qa * &params.omega * qa.transpose();
        let om = 0.5 * (&om + om.transpose());
        let dz = &qa * params.delta();
        let mean_z = &dz * (2.0 / std::f64::consts::PI).sqrt();
        let cov_z = &om - (2.0 / std::f64::consts::PI) * &dz * dz.transpose();

        let omega1_sq = om[(0, 0)];
        let dn = dz[0] / omega1_sq.sqrt();
        let shape1 = if dn == 0.0 { 0.0 } else { dn / (1.0 - dn * dn).sqrt() };

        let mut mu = mean_z.clone();
        mu[0] = 0.0;
        let mut v = cov_z;
        v[(0, 0)] = 1.0;
        if d > 1 {
            // z_j = b_j z₁ + independent noise, so Cov(g(z₁), z_j) = b_j E[g(z₁) z₁]
            let needs_cross = (1..d).any(|j| om[(j, 0)] != 0.0);
            let cross = if needs_cross {
                let f = |z: f64| {
                    let p = sn_pdf(z, 0.0, omega1_sq, shape1);
                    if p == 0.0 {
                        return 0.0;
                    }
                    match gaussianize(z, omega1_sq, shape1) {
                        Ok((g, _)) => g * z * p,
                        Err(_) => 0.0,
                    }
                };
                integrate_1d(&f, f64::NEG_INFINITY, f64::INFINITY, 1e-12)?
            } else {
                0.0
            };
            for j in 1..d {
                let c = om[(j, 0)] / omega1_sq * cross;
                v[(0, j)] = c;
                v[(j, 0)] = c;
            }
        }
        let v_inv_sqrt = inv_sqrt_spd(&v)?;
        Ok(OtMap { frame, xi: params.xi.clone(), pre, q, omega1_sq, shape1, mu, v, v_inv_sqrt })
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    fn rotate(&self, x: &[f64]) -> Result<DVector<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(BdmError::Dimension { expected: format!("{d} coordinates"), got: x.len() });
        }
        Ok(self.q.transpose() * &self.pre * (DVector::from_column_slice(x) - &self.xi))
    }

    /// The strictly increasing first-coordinate transform.
    pub fn transform_first(&self, z: f64) -> Result<f64> {
        gaussianize(z, self.omega1_sq, self.shape1).map(|g| g.0)
    }

    pub fn apply(&self, x: &[f64]) -> Result<OtPoint> {
        let mut w = self.rotate(x)?;
        let (g, saturated) = gaussianize(w[0], self.omega1_sq, self.shape1)?;
        w[0] = g;
        Ok(OtPoint { u: &self.v_inv_sqrt * (w - &self.mu), saturated })
    }

    /// The point mapped to the origin.
    pub fn center(&self) -> Result<DVector<f64>> {
        let mut z = self.mu.clone();
        z[0] = sn_quantile(0.5, 0.0, self.omega1_sq, self.shape1)?;
        let pre_inv = self
            .pre
            .clone()
            .try_inverse()
            .ok_or_else(|| BdmError::LinearAlgebra("singular frame matrix".into()))?;
        Ok(&self.xi + pre_inv * (&self.q * z))
    }
}

pub fn bdm_sn_multi(params: &SnParams, theta0: &[f64]) -> Result<BdmResult> {
    bdm_sn_multi_in(params, theta0, Frame::default())
}

/// `δ = P(χ²_d ≤ ‖T(θ₀)‖²)`.
pub fn bdm_sn_multi_in(params: &SnParams, theta0: &[f64], frame: Frame) -> Result<BdmResult> {
    let map = OtMap::build_in(params, frame)?;
    let pt = map.apply(theta0)?;
    let r2 = pt.u.norm_squared();
    let delta = chi2_cdf(r2, map.dim())?;
    let mut out = BdmResult::from_raw_delta(Method::Sn, theta0.to_vec(), delta)
        .with("u_norm", r2.sqrt())
        .with("saturated", if pt.saturated { 1.0 } else { 0.0 });
    for (i, ui) in pt.u.iter().enumerate() {
        out = out.with(&format!("u{}", i + 1), *ui);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PushforwardReport {
    pub n_draws: usize,
    pub seed: u64,
    pub max_abs_mean: f64,
    /// Largest entry of `|cov - I|`.
    pub cov_dev: f64,
    pub max_abs_skewness: f64,
    /// Correlation of sample quantiles of `‖U‖²` with χ²_d quantiles at 999 levels.
    pub qq_correlation: f64,
    pub saturated: usize,
}

pub const MIN_DRAWS: usize = 10_000;

/// Monte Carlo check that the map sends the fitted skew-normal to `N(0, I)`.
pub fn pushforward_diagnostic(params: &SnParams, frame: Frame, n_draws: usize, seed: u64) -> Result<PushforwardReport> {
    if n_draws < MIN_DRAWS {
        return Err(BdmError::Domain(format!("need at least {MIN_DRAWS} draws, got {n_draws}")));
    }
    let map = OtMap::build_in(params, frame)?;
    let d = map.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = sn_sample(params, &mut rng, n_draws)?;
    let mut us = Vec::with_capacity(n_draws);
    let mut saturated = 0;
    for x in &draws {
        let pt = map.apply(x.as_slice())?;
        saturated += pt.saturated as usize;
        us.push(pt.u);
    }
    let n = n_draws as f64;
    let mean = us.iter().fold(DVector::zeros(d), |acc, u| acc + u) / n;
    let mut cov = DMatrix::zeros(d, d);
    let mut m3 = DVector::zeros(d);
    for u in &us {
        let c = u - &mean;
        cov += &c * c.transpose();
        m3 += c.map(|v| v * v * v);
    }
    cov /= n;
    m3 /= n;
    let skew = (0..d).map(|i| m3[i] / cov[(i, i)].powf(1.5)).fold(0.0f64, |a, s| a.max(s.abs()));
    let cov_dev = (&cov - DMatrix::identity(d, d)).amax();

    let mut r2: Vec<f64> = us.iter().map(|u| u.norm_squared()).collect();
    r2.sort_by(f64::total_cmp);
    let mut sample_q = Vec::with_capacity(999);
    let mut theory_q = Vec::with_capacity(999);
    for k in 1..1000 {
        let p = k as f64 / 1000.0;
        sample_q.push(r2[((p * n) as usize).min(n_draws - 1)]);
        theory_q.push(chi2_quantile(p, d)?);
    }
    Ok(PushforwardReport {
        n_draws,
        seed,
        max_abs_mean: mean.amax(),
        cov_dev,
        max_abs_skewness: skew,
        qq_correlation: pearson(&sample_q, &theory_q),
        saturated,
    })
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Writes `n` seeded draws and their images as CSV (`x1..xd,u1..ud`).
pub fn write_samples_csv<W: Write>(params: &SnParams, frame: Frame, n: usize, seed: u64, out: W) -> Result<()> {
    let map = OtMap::build_in(params, frame)?;
    let d = map.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = sn_sample(params, &mut rng, n)?;
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| BdmError::Io(e.to_string());
    let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).chain((1..=d).map(|i| format!("u{i}"))).collect();
    w.write_record(&header).map_err(io)?;
    for x in &draws {
        let u = map.apply(x.as_slice())?.u;
        let rec: Vec<String> = x.iter().chain(u.iter()).map(|v| format!("{v}")).collect();
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| BdmError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snmatch::bdm_sn_univariate;

    fn params3() -> SnParams {
        let omega = DMatrix::from_row_slice(3, 3, &[1.2, 0.3, -0.2, 0.3, 0.8, 0.1, -0.2, 0.1, 0.6]);
        SnParams::new(DVector::from_vec(vec![0.5, -0.3, 1.0]), omega, DVector::from_vec(vec![2.0, -1.0, 0.5])).unwrap()
    }

    #[test]
    fn rotation_is_orthogonal_and_aligned() {
        let a = DVector::from_vec(vec![0.3, -2.0, 1.1]);
        let q = align_first_axis(&a);
        assert!((q.transpose() * &q - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!((q.column(0) - &a / a.norm()).amax() < 1e-14);
        let e1 = DVector::from_vec(vec![2.0, 0.0, 0.0]);
        assert_eq!(align_first_axis(&e1), DMatrix::identity(3, 3));
    }

    #[test]
    fn univariate_reduction() {
        let p = SnParams::new(DVector::from_vec(vec![0.4]), DMatrix::from_element(1, 1, 0.7), DVector::from_vec(vec![-3.0])).unwrap();
        for frame in [Frame::Raw, Frame::Whitened] {
            for i in 0..50 {
                let t = -2.0 + 5.0 * i as f64 / 49.0;
                let multi = bdm_sn_multi_in(&p, &[t], frame).unwrap().delta();
                let uni = bdm_sn_univariate(&p, t).unwrap().delta();
                assert!((multi - uni).abs() < 1e-10, "{t}: {multi} vs {uni}");
            }
        }
    }

    #[test]
    fn center_maps_to_origin() {
        let p = params3();
        for frame in [Frame::Raw, Frame::Whitened] {
            let map = OtMap::build_in(&p, frame).unwrap();
            let c = map.center().unwrap();
            assert!(map.apply(c.as_slice()).unwrap().u.amax() < 1e-8);
            assert!(bdm_sn_multi_in(&p, c.as_slice(), frame).unwrap().delta() < 1e-12);
        }
    }

    #[test]
    fn shape1_matches_rotated_norm() {
        let p = params3();
        let map = OtMap::build_in(&p, Frame::Raw).unwrap();
        assert!((map.shape1 - p.alpha_raw().norm() * map.omega1_sq.sqrt()).abs() < 1e-10);
        let w = OtMap::build_in(&p, Frame::Whitened).unwrap();
        assert!((w.v.clone() - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!((w.omega1_sq - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_map_is_whitening() {
        let omega = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = SnParams::new(DVector::from_vec(vec![1.0, 2.0]), omega.clone(), DVector::zeros(2)).unwrap();
        let x = [1.7, 0.9];
        let r = DVector::from_vec(vec![0.7, -1.1]);
        let mahal = r.dot(&(omega.try_inverse().unwrap() * &r));
        for frame in [Frame::Raw, Frame::Whitened] {
            let map = OtMap::build_in(&p, frame).unwrap();
            assert_eq!(map.shape1, 0.0);
            assert!((map.apply(&x).unwrap().u.norm_squared() - mahal).abs() < 1e-10);
            assert!(map.apply(&[1.0, 2.0]).unwrap().u.amax() < 1e-14);
        }
    }

    #[test]
    fn pushforward_is_deterministic() {
        let p = params3();
        let a = pushforward_diagnostic(&p, Frame::Whitened, 20_000, 7).unwrap();
        let b = pushforward_diagnostic(&p, Frame::Whitened, 20_000, 7).unwrap();
        assert_eq!(a, b);
        assert!(pushforward_diagnostic(&p, Frame::Whitened, 100, 7).is_err());
    }
}
