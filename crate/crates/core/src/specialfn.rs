//! Special functions: standard normal, chi-squared, Owen's T, the univariate
//! skew-normal CDF and the derivatives of `log Φ`.
//!
//! `erfc` and `lgamma` come from `libm`; everything else is evaluated here.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{BdmError, Result};

/// `1/sqrt(2π)`.
pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// `log(sqrt(2π))`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// A value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Probability(f64);

impl Probability {
    pub const ZERO: Probability = Probability(0.0);
    pub const ONE: Probability = Probability(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Probability(value))
        } else {
            Err(BdmError::Domain(format!("probability {value} outside [0, 1]")))
        }
    }

    /// Clamps into `[0, 1]`; NaN maps to 0.
    pub fn saturating(value: f64) -> Self {
        if value.is_nan() {
            Probability(0.0)
        } else {
            Probability(value.clamp(0.0, 1.0))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn complement(self) -> Self {
        Probability(1.0 - self.0)
    }
}

impl From<Probability> for f64 {
    fn from(p: Probability) -> f64 {
        p.0
    }
}

pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn norm_logpdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal survival function `1 - Φ(x)`, accurate in the upper tail.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// `log Φ(x)`, finite for all finite `x`.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > 5.0 {
        (-norm_sf(x)).ln_1p()
    } else if x > -30.0 {
        norm_cdf(x).ln()
    } else {
        // log Φ(x) = log φ(x) - log(-x) + log(1 - 1/x² + 3/x⁴ - ...)
        let x2 = x * x;
        norm_logpdf(x) - (-x).ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

/// Standard normal quantile. Acklam's rational start refined by two Halley
/// steps against [`norm_cdf`].
pub fn norm_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(BdmError::Domain(format!(
            "normal quantile needs p in (0, 1), got {p}"
        )));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let tail = |q: f64| {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    let mut x = if p < P_LOW {
        tail(p)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail(1.0 - p)
    };

    for _ in 0..2 {
        // Work in whichever tail keeps the residual well conditioned.
        let e = if x < 0.0 {
            norm_cdf(x) - p
        } else {
            (1.0 - p) - norm_sf(x)
        };
        let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        if !u.is_finite() {
            break;
        }
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

/// Regularized incomplete gamma pair `(P(a, x), Q(a, x))`.
pub fn reg_gamma(a: f64, x: f64) -> Result<(f64, f64)> {
    if !(a > 0.0) || !(x >= 0.0) {
        return Err(BdmError::Domain(format!(
            "incomplete gamma needs a > 0, x >= 0 (a = {a}, x = {x})"
        )));
    }
    if x == 0.0 {
        return Ok((0.0, 1.0));
    }
    if x.is_infinite() {
        return Ok((1.0, 0.0));
    }
    let log_prefactor = -x + a * x.ln() - libm::lgamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        for n in 1..10_000 {
            term *= x / (a + n as f64);
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        let p = sum * log_prefactor.exp();
        Ok((p, 1.0 - p))
    } else {
        // Modified Lentz evaluation of the continued fraction for Q.
        const TINY: f64 = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let q = log_prefactor.exp() * h;
        Ok((1.0 - q, q))
    }
}

/// Chi-squared CDF with `d` degrees of freedom.
pub fn chi2_cdf(x: f64, d: usize) -> Result<f64> {
    if x < 0.0 || x.is_nan() {
        return Err(BdmError::Domain(format!("chi-squared CDF at negative x = {x}")));
    }
    if d == 0 {
        return Err(BdmError::Domain("chi-squared needs d >= 1".into()));
    }
    Ok(reg_gamma(0.5 * d as f64, 0.5 * x)?.0)
}

/// Chi-squared quantile by safeguarded bisection on [`chi2_cdf`].
pub fn chi2_quantile(p: f64, d: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(BdmError::Domain(format!(
            "chi-squared quantile needs p in (0, 1), got {p}"
        )));
    }
    let mut lo = 0.0;
    let mut hi = d as f64 + 10.0 * (2.0 * d as f64).sqrt() + 10.0;
    while chi2_cdf(hi, d)? < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, d)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z_next = z - p1 / dp;
            let done = (z_next - z).abs() < 1e-15;
            z = z_next;
            if done {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

const OWENS_T_NODES: usize = 32;

fn owens_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(OWENS_T_NODES))
}

/// Owen's T function
/// `T(h, a) = 1/(2π) ∫₀ᵃ exp(-h²(1+x²)/2) / (1+x²) dx`.
pub fn owens_t(h: f64, a: f64) -> f64 {
    if a == 0.0 || h.is_infinite() {
        return 0.0;
    }
    if a < 0.0 {
        return -owens_t(h, -a);
    }
    let h = h.abs();
    if a <= 1.0 {
        owens_t_direct(h, a)
    } else if a.is_infinite() {
        0.5 * norm_sf(h)
    } else {
        let ah = a * h;
        0.5 * (norm_cdf(h) * norm_sf(ah) + norm_cdf(ah) * norm_sf(h)) - owens_t_direct(ah, 1.0 / a)
    }
}

fn owens_t_direct(h: f64, a: f64) -> f64 {
    let (nodes, weights) = owens_rule();
    let half = 0.5 * a;
    let hh = 0.5 * h * h;
    let mut sum = 0.0;
    for (x, w) in nodes.iter().zip(weights) {
        let t = half * (x + 1.0);
        let one_t2 = 1.0 + t * t;
        sum += w * (-hh * one_t2).exp() / one_t2;
    }
    sum * half / (2.0 * PI)
}

/// Univariate skew-normal density with location `xi`, scale² `omega2`, shape `alpha`.
pub fn sn_pdf(x: f64, xi: f64, omega2: f64, alpha: f64) -> f64 {
    let omega = omega2.sqrt();
    let z = (x - xi) / omega;
    2.0 * norm_pdf(z) * norm_cdf(alpha * z) / omega
}

/// Univariate skew-normal CDF `Φ(z) - 2 T(z, α)`, `z = (x - ξ)/ω`.
pub fn sn_cdf(x: f64, xi: f64, omega2: f64, alpha: f64) -> Result<f64> {
    if !(omega2 > 0.0) {
        return Err(BdmError::Domain(format!(
            "skew-normal scale must be positive, got omega2 = {omega2}"
        )));
    }
    let z = (x - xi) / omega2.sqrt();
    if z == f64::INFINITY {
        return Ok(1.0);
    }
    if z == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    if z < 0.0 && alpha * z < -1.0 {
        return sn_thin_tail(z, alpha);
    }
    let value = norm_cdf(z) - 2.0 * owens_t(z, alpha);
    Ok(value.clamp(0.0, 1.0))
}

// On the short side of a skewed density Φ(z) - 2T(z, α) loses every digit to
// cancellation. Integrate the density instead, relative to its value at z.
fn sn_thin_tail(z: f64, alpha: f64) -> Result<f64> {
    let log_p = |t: f64| norm_logpdf(t) + log_norm_cdf(alpha * t);
    let at_z = log_p(z);
    if at_z < -745.0 {
        return Ok(0.0);
    }
    let ratio = |s: f64| (log_p(z - s) - at_z).exp();
    let j = crate::calculus::integrate_1d(&ratio, 0.0, f64::INFINITY, 1e-14)?;
    Ok((2.0 * at_z.exp() * j).clamp(0.0, 1.0))
}

/// Skew-normal quantile by bisection on [`sn_cdf`].
pub fn sn_quantile(p: f64, xi: f64, omega2: f64, alpha: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(BdmError::Domain(format!(
            "skew-normal quantile needs p in (0, 1), got {p}"
        )));
    }
    let omega = omega2.sqrt();
    let mut lo = xi - omega;
    let mut hi = xi + omega;
    while sn_cdf(lo, xi, omega2, alpha)? > p {
        lo -= 2.0 * (hi - lo);
    }
    while sn_cdf(hi, xi, omega2, alpha)? < p {
        hi += 2.0 * (hi - lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sn_cdf(mid, xi, omega2, alpha)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * omega.max(mid.abs()) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `(ζ₁, ζ₂, ζ₃)(κ)`: first three derivatives of `log Φ` at `κ`.
pub fn zeta_all(kappa: f64) -> [f64; 3] {
    let z1 = if kappa < -30.0 {
        // Mills-ratio asymptotics: Φ(κ) ≈ φ(κ)/(-κ) · (1 - 1/κ² + 3/κ⁴).
        let k2 = kappa * kappa;
        -kappa / (1.0 - 1.0 / k2 + 3.0 / (k2 * k2))
    } else {
        (norm_logpdf(kappa) - log_norm_cdf(kappa)).exp()
    };
    let z2 = -z1 * (kappa + z1);
    let z3 = -z2 * (kappa + z1) - z1 * (1.0 + z2);
    [z1, z2, z3]
}

/// `ζ_k(κ)` for `k ∈ {1, 2, 3}`.
pub fn zeta(k: usize, kappa: f64) -> Result<f64> {
    match k {
        1..=3 => Ok(zeta_all(kappa)[k - 1]),
        _ => Err(BdmError::Domain(format!("zeta order must be 1, 2 or 3, got {k}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson on a finite interval, independent of the library quadrature.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn norm_cdf_values() {
        assert_eq!(norm_cdf(0.0), 0.5);
        let oracle = 0.5 + simpson(norm_pdf, 0.0, 0.6124, 2000);
        assert!((norm_cdf(0.6124) - oracle).abs() < 1e-12);
        assert!((norm_cdf(0.6124) - 0.729_863).abs() < 1e-6);
        assert!(norm_cdf(-8.0) < 1e-15);
        // φ(8)/8 bounds the tail from above
        assert!(norm_cdf(-8.0) < norm_pdf(8.0) / 8.0);
        assert!(norm_cdf(-8.0) > norm_pdf(8.0) / 8.0 * (1.0 - 1.0 / 64.0));
    }

    #[test]
    fn norm_quantile_values() {
        assert_eq!(norm_quantile(0.5).unwrap(), 0.0);
        assert!((norm_quantile(0.975).unwrap() - 1.959_964).abs() < 1e-6);
        assert!((norm_quantile(norm_cdf(1.3)).unwrap() - 1.3).abs() < 1e-10);
        assert!(norm_quantile(0.0).is_err());
        assert!(norm_quantile(1.0).is_err());
        for &p in &[1e-300, 1e-20, 1e-8, 0.01, 0.3, 0.7, 0.99, 1.0 - 1e-10] {
            let x = norm_quantile(p).unwrap();
            let back = if x < 0.0 { norm_cdf(x) } else { 1.0 - norm_sf(x) };
            assert!((back - p).abs() <= 1e-10 * p.clamp(1e-300, 1.0), "p = {p}");
        }
    }

    #[test]
    fn chi2_values() {
        assert_eq!(chi2_cdf(0.0, 3).unwrap(), 0.0);
        assert!((chi2_cdf(1.0, 1).unwrap() - 0.682_689).abs() < 1e-6);
        assert!(chi2_cdf(-1.0, 1).is_err());
        // Gamma(6, rate 7.2) CDF at 5/6 equals P(6, 6)
        let (p, _) = reg_gamma(6.0, 7.2 * 5.0 / 6.0).unwrap();
        assert!((p - 0.5543).abs() < 1e-4);
        // series oracle: P(n, x) = 1 - e^{-x} Σ_{k<n} x^k/k! for integer n
        let x: f64 = 6.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..6 {
            term *= x / k as f64;
            sum += term;
        }
        assert!((p - (1.0 - (-x).exp() * sum)).abs() < 1e-14);
        let q = chi2_quantile(0.95, 2).unwrap();
        assert!((q - 2.0 * -(0.05f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn owens_t_values() {
        assert_eq!(owens_t(1.3, 0.0), 0.0);
        for &a in &[0.3, 1.0, 2.5, -4.0] {
            let expected = f64::atan(a) / (2.0 * PI);
            assert!((owens_t(0.0, a) - expected).abs() < 1e-14);
        }
        // 2-D oracle: T(h,a) = P(X > h, 0 < Y < aX) for independent standard normals
        let two_d = |h: f64, a: f64| {
            simpson(
                |x| norm_pdf(x) * (norm_cdf(a * x) - 0.5),
                h,
                h + 40.0,
                20_000,
            )
        };
        for &(h, a) in &[(1.0, 1.0), (0.5, 0.3), (2.0, 3.0), (0.1, 7.0)] {
            assert!((owens_t(h, a) - two_d(h, a)).abs() < 1e-10, "h={h} a={a}");
        }
    }

    #[test]
    fn sn_cdf_values() {
        for &x in &[-2.0, -0.3, 0.0, 1.7] {
            assert!((sn_cdf(x, 0.0, 1.0, 0.0).unwrap() - norm_cdf(x)).abs() < 1e-15);
        }
        let alpha = 2.3;
        let at_xi = sn_cdf(0.4, 0.4, 2.0, alpha).unwrap();
        assert!((at_xi - (0.5 - alpha.atan() / PI)).abs() < 1e-14);
        assert!(sn_cdf(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(sn_cdf(0.0, 0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn zeta_values() {
        let z1 = zeta(1, 0.0).unwrap();
        assert!((z1 - (2.0 / PI).sqrt()).abs() < 1e-14);
        assert!((zeta(2, 0.0).unwrap() + 2.0 / PI).abs() < 1e-14);
        assert!(zeta(4, 0.0).is_err());
        assert!(zeta(0, 0.0).is_err());
        // finite differences of log Φ at 0.7
        let f = log_norm_cdf;
        let h = 1e-3;
        let k = 0.7;
        let d1 = (f(k + h) - f(k - h)) / (2.0 * h);
        let d2 = (f(k + h) - 2.0 * f(k) + f(k - h)) / (h * h);
        let d3 = (f(k + 2.0 * h) - 2.0 * f(k + h) + 2.0 * f(k - h) - f(k - 2.0 * h)) / (2.0 * h * h * h);
        assert!((zeta(1, k).unwrap() - d1).abs() < 1e-6);
        assert!((zeta(2, k).unwrap() - d2).abs() < 1e-6);
        assert!((zeta(3, k).unwrap() - d3).abs() < 1e-6);
    }

    #[test]
    fn zeta_deep_tail_is_finite_and_continuous() {
        let left = zeta_all(-30.0 - 1e-9);
        let right = zeta_all(-30.0 + 1e-9);
        for k in 0..3 {
            assert!(left[k].is_finite() && right[k].is_finite());
        }
        assert!((left[0] / right[0] - 1.0).abs() < 1e-7);
        let deep = zeta_all(-1e4);
        assert!((deep[0] - 1e4).abs() / 1e4 < 1e-6);
        assert!((deep[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn probability_newtype() {
        assert!(Probability::new(1.1).is_err());
        assert_eq!(Probability::saturating(-0.2), Probability::ZERO);
        assert_eq!(Probability::new(0.25).unwrap().complement().value(), 0.75);
    }
}
