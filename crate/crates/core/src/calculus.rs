//! Finite differences up to third order, Newton maximization, adaptive and
//! Gauss–Hermite quadrature, and Brent's root finder.

use std::collections::BinaryHeap;
use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{BdmError, Result};

/// Scalar function of a parameter vector.
pub type RealFn<'a> = &'a dyn Fn(&[f64]) -> f64;

/// Analytic gradient and Hessian of a [`RealFn`].
pub type GradHessFn<'a> = &'a dyn Fn(&[f64]) -> (DVector<f64>, DMatrix<f64>);

/// Dense `d × d × d` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    d: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d: usize) -> Self {
        Tensor3 { d, data: vec![0.0; d * d * d] }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.d + j) * self.d + k]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let d = self.d;
        self.data[(i * d + j) * d + k] = v;
    }

    /// Writes `v` into all six permutations of `(i, j, k)`.
    pub fn set_sym(&mut self, i: usize, j: usize, k: usize, v: f64) {
        for (a, b, c) in [(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
            self.set(a, b, c, v);
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_fn(self.d, |i, _| self.get(i, i, i))
    }

    /// Reorders every axis by `perm` (new index `a` reads old index `perm[a]`).
    pub fn permuted(&self, perm: &[usize]) -> Tensor3 {
        let mut out = Tensor3::zeros(self.d);
        for i in 0..self.d {
            for j in 0..self.d {
                for k in 0..self.d {
                    out.set(i, j, k, self.get(perm[i], perm[j], perm[k]));
                }
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Tensor3 {
        Tensor3 { d: self.d, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &Tensor3) -> Tensor3 {
        Tensor3 {
            d: self.d,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    /// Largest deviation between an entry and any of its index permutations,
    /// relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let mut worst = 0.0f64;
        for i in 0..self.d {
            for j in 0..self.d {
                for k in 0..self.d {
                    let v = self.get(i, j, k);
                    for w in [self.get(i, k, j), self.get(j, i, k), self.get(k, j, i)] {
                        worst = worst.max((v - w).abs());
                    }
                }
            }
        }
        worst / scale
    }

    pub fn as_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.d)
            .map(|i| {
                (0..self.d)
                    .map(|j| (0..self.d).map(|k| self.get(i, j, k)).collect())
                    .collect()
            })
            .collect()
    }
}

/// Output of [`fd_derivatives`]. Entries above the requested order are zero.
#[derive(Debug, Clone)]
pub struct DiffReport {
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub third_unmixed: DVector<f64>,
    pub third_full: Option<Tensor3>,
    /// Base first-order step before per-coordinate scaling.
    pub step: f64,
}

fn eval(f: RealFn, x: &[f64]) -> Result<f64> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(BdmError::Evaluation { point: x.to_vec() })
    }
}

fn shifted(x: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut y = x.to_vec();
    for &(i, h) in moves {
        y[i] += h;
    }
    y
}

fn coord_steps(x: &[f64], base: f64) -> Vec<f64> {
    x.iter().map(|xi| base * xi.abs().max(1.0)).collect()
}

/// Central-difference gradient.
pub fn fd_gradient(f: RealFn, x: &[f64]) -> Result<DVector<f64>> {
    let h = coord_steps(x, f64::EPSILON.cbrt());
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let up = eval(f, &shifted(x, &[(i, h[i])]))?;
        let dn = eval(f, &shifted(x, &[(i, -h[i])]))?;
        g[i] = (up - dn) / (2.0 * h[i]);
    }
    Ok(g)
}

/// Central-difference Hessian with per-coordinate steps `eps^(1/4)·max(1,|xᵢ|)`.
pub fn fd_hessian(f: RealFn, x: &[f64]) -> Result<DMatrix<f64>> {
    fd_hessian_with(f, x, &coord_steps(x, f64::EPSILON.powf(0.25)))
}

fn fd_hessian_with(f: RealFn, x: &[f64], h: &[f64]) -> Result<DMatrix<f64>> {
    let d = x.len();
    let f0 = eval(f, x)?;
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        let up = eval(f, &shifted(x, &[(i, h[i])]))?;
        let dn = eval(f, &shifted(x, &[(i, -h[i])]))?;
        hess[(i, i)] = (up - 2.0 * f0 + dn) / (h[i] * h[i]);
        for j in 0..i {
            let pp = eval(f, &shifted(x, &[(i, h[i]), (j, h[j])]))?;
            let pm = eval(f, &shifted(x, &[(i, h[i]), (j, -h[j])]))?;
            let mp = eval(f, &shifted(x, &[(i, -h[i]), (j, h[j])]))?;
            let mm = eval(f, &shifted(x, &[(i, -h[i]), (j, -h[j])]))?;
            let v = (pp - pm - mp + mm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// Unmixed third derivatives from the stencil `[-2h, -h, h, 2h]` with weights
/// `[-1/2, 1, -1, 1/2] / h³`.
pub fn fd_third_unmixed(f: RealFn, x: &[f64]) -> Result<DVector<f64>> {
    let h = coord_steps(x, f64::EPSILON.powf(0.2));
    let mut t = DVector::zeros(x.len());
    for i in 0..x.len() {
        let hi = h[i];
        let m2 = eval(f, &shifted(x, &[(i, -2.0 * hi)]))?;
        let m1 = eval(f, &shifted(x, &[(i, -hi)]))?;
        let p1 = eval(f, &shifted(x, &[(i, hi)]))?;
        let p2 = eval(f, &shifted(x, &[(i, 2.0 * hi)]))?;
        t[i] = (-0.5 * m2 + m1 - p1 + 0.5 * p2) / (hi * hi * hi);
    }
    Ok(t)
}

/// Full third-derivative tensor. Diagonal entries use the unmixed stencil,
/// mixed entries central differences of FD Hessians; the result is symmetrized.
pub fn fd_third_full(f: RealFn, x: &[f64]) -> Result<Tensor3> {
    let d = x.len();
    let h = coord_steps(x, f64::EPSILON.powf(0.2));
    let mut raw = Tensor3::zeros(d);
    for i in 0..d {
        let up = fd_hessian_with(f, &shifted(x, &[(i, h[i])]), &h)?;
        let dn = fd_hessian_with(f, &shifted(x, &[(i, -h[i])]), &h)?;
        for j in 0..d {
            for k in 0..d {
                raw.set(i, j, k, (up[(j, k)] - dn[(j, k)]) / (2.0 * h[i]));
            }
        }
    }
    let mut sym = Tensor3::zeros(d);
    for i in 0..d {
        for j in i..d {
            for k in j..d {
                let perms = [(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)];
                let mean = perms.iter().map(|&(a, b, c)| raw.get(a, b, c)).sum::<f64>() / 6.0;
                sym.set_sym(i, j, k, mean);
            }
        }
    }
    let diag = fd_third_unmixed(f, x)?;
    for i in 0..d {
        sym.set(i, i, i, diag[i]);
    }
    Ok(sym)
}

/// Finite-difference derivatives of `f` at `x` up to `order` (1, 2 or 3).
pub fn fd_derivatives(f: RealFn, x: &[f64], order: usize, want_full_tensor: bool) -> Result<DiffReport> {
    if !(1..=3).contains(&order) {
        return Err(BdmError::Domain(format!("derivative order must be 1..=3, got {order}")));
    }
    let d = x.len();
    let gradient = fd_gradient(f, x)?;
    let hessian = if order >= 2 { fd_hessian(f, x)? } else { DMatrix::zeros(d, d) };
    let (third_unmixed, third_full) = if order == 3 {
        if want_full_tensor {
            let full = fd_third_full(f, x)?;
            (full.diagonal(), Some(full))
        } else {
            (fd_third_unmixed(f, x)?, None)
        }
    } else {
        (DVector::zeros(d), None)
    };
    Ok(DiffReport { gradient, hessian, third_unmixed, third_full, step: f64::EPSILON.cbrt() })
}

/// Settings for [`maximize_with`].
#[derive(Debug, Clone, Copy)]
pub struct MaxOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MaxOptions {
    fn default() -> Self {
        MaxOptions { tol: 1e-9, max_iter: 200 }
    }
}

/// Maximizes `f` from `x0` with finite-difference derivatives.
pub fn maximize(f: RealFn, x0: &[f64], tol: f64) -> Result<DVector<f64>> {
    maximize_with(f, None, x0, MaxOptions { tol, ..Default::default() })
}

/// Newton ascent with backtracking. Falls back to steepest ascent when the
/// Hessian is not negative definite. Converges when `‖∇f‖∞ ≤ tol`, or when the
/// finite-difference gradient stalls at its noise floor below `1e-6`.
pub fn maximize_with(f: RealFn, derivs: Option<GradHessFn>, x0: &[f64], opts: MaxOptions) -> Result<DVector<f64>> {
    let d = x0.len();
    if d == 0 {
        return Ok(DVector::zeros(0));
    }
    let grad_hess = |x: &[f64]| -> Result<(DVector<f64>, DMatrix<f64>)> {
        match derivs {
            Some(gh) => {
                let (g, h) = gh(x);
                if g.iter().chain(h.iter()).all(|v| v.is_finite()) {
                    Ok((g, h))
                } else {
                    Err(BdmError::Evaluation { point: x.to_vec() })
                }
            }
            None => Ok((fd_gradient(f, x)?, fd_hessian(f, x)?)),
        }
    };

    let mut x = DVector::from_column_slice(x0);
    let mut fx = eval(f, x.as_slice())?;
    let mut trace = Vec::new();
    let mut floor_gnorm: Option<f64> = None;
    for _ in 0..opts.max_iter {
        let (g, h) = grad_hess(x.as_slice())?;
        let gnorm = g.amax();
        trace.push(gnorm);
        let newton = (-&h).cholesky().map(|c| c.solve(&g));
        if gnorm <= opts.tol {
            return accept(x, newton.as_ref(), &trace);
        }

        let (dir, is_newton) = match newton {
            Some(p) => (p, true),
            None => {
                let n = g.norm();
                (&g / n.max(1.0), false)
            }
        };
        let slope = g.dot(&dir);
        if is_newton && 0.5 * slope <= 8.0 * f64::EPSILON * fx.abs().max(1.0) {
            // The predicted gain is below the resolution of f, so a line search
            // cannot confirm it. Take plain Newton steps until the gradient
            // stops shrinking (its roundoff floor).
            if floor_gnorm.is_some_and(|p| gnorm > 0.5 * p) {
                return accept(x, Some(&dir), &trace);
            }
            floor_gnorm = Some(gnorm);
            let cand = &x + &dir;
            let fc = f(cand.as_slice());
            if !fc.is_finite() {
                return Ok(x);
            }
            x = cand;
            fx = fc;
            continue;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + t * &dir;
            let fc = f(cand.as_slice());
            if fc.is_finite() && fc >= fx + 1e-4 * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, fc)) => {
                let moved = (&cand - &x).amax();
                x = cand;
                fx = fc;
                if derivs.is_none() && is_newton && moved <= 1e-14 * x.amax().max(1.0) && gnorm <= 1e-6 {
                    return Ok(x);
                }
            }
            None => {
                // No ascent possible along the search direction.
                if derivs.is_none() && gnorm <= 1e-6 {
                    return Ok(x);
                }
                return Err(BdmError::Convergence { iterations: trace.len(), grad_norm: gnorm, trace });
            }
        }
    }
    let (g, _) = grad_hess(x.as_slice())?;
    if g.amax() <= opts.tol {
        return Ok(x);
    }
    Err(BdmError::Convergence { iterations: opts.max_iter, grad_norm: g.amax(), trace })
}

// A vanishing gradient with an O(1) Newton step means f flattens out toward a
// supremum at infinity (e.g. separated logistic data), not a maximum.
fn accept(x: DVector<f64>, step: Option<&DVector<f64>>, trace: &[f64]) -> Result<DVector<f64>> {
    match step {
        Some(s) if s.amax() > 1e-3 * x.amax().max(1.0) => Err(BdmError::Convergence {
            iterations: trace.len(),
            grad_norm: trace.last().copied().unwrap_or(f64::NAN),
            trace: trace.to_vec(),
        }),
        _ => Ok(x),
    }
}

/// Maximizes `f` over every coordinate except `psi_index`, which is held at
/// `psi_value`. Returns the optimal nuisance vector λ̂_ψ.
pub fn profile_maximize(
    f: RealFn,
    derivs: Option<GradHessFn>,
    psi_index: usize,
    psi_value: f64,
    lambda0: &[f64],
    opts: MaxOptions,
) -> Result<DVector<f64>> {
    if lambda0.is_empty() {
        return Ok(DVector::zeros(0));
    }
    let d = lambda0.len() + 1;
    if psi_index >= d {
        return Err(BdmError::Dimension { expected: format!("psi_index < {d}"), got: psi_index });
    }
    let slice = |lam: &[f64]| f(&embed(psi_index, psi_value, lam));
    let slice_derivs = derivs.map(|gh| {
        move |lam: &[f64]| {
            let (g, h) = gh(&embed(psi_index, psi_value, lam));
            let keep: Vec<usize> = (0..d).filter(|&i| i != psi_index).collect();
            let gs = DVector::from_fn(d - 1, |a, _| g[keep[a]]);
            let hs = DMatrix::from_fn(d - 1, d - 1, |a, b| h[(keep[a], keep[b])]);
            (gs, hs)
        }
    });
    match &slice_derivs {
        Some(sd) => maximize_with(&slice, Some(sd), lambda0, opts),
        None => maximize_with(&slice, None, lambda0, opts),
    }
}

/// Inserts `psi` at `index` into the nuisance vector.
pub fn embed(index: usize, psi: f64, lambda: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(lambda.len() + 1);
    v.extend_from_slice(&lambda[..index]);
    v.push(psi);
    v.extend_from_slice(&lambda[index..]);
    v
}

/// Removes coordinate `index`.
pub fn drop_index(index: usize, theta: &[f64]) -> Vec<f64> {
    theta.iter().enumerate().filter(|&(i, _)| i != index).map(|(_, v)| *v).collect()
}

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

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// One 15-point Kronrod panel with the QUADPACK error heuristic.
fn kronrod15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> Segment {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    let mut abs_sum = kron.abs();
    let mut fv1 = [0.0; 7];
    let mut fv2 = [0.0; 7];
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        kron += WGK[j] * (f1 + f2);
        abs_sum += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * kron;
    let mut asc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = kron * half;
    let res_abs = abs_sum * half.abs();
    let res_asc = asc * half.abs();
    let mut error = ((kron - gauss) * half).abs();
    if res_asc != 0.0 && error != 0.0 {
        error = res_asc * (200.0 * error / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        error = error.max(50.0 * f64::EPSILON * res_abs);
    }
    Segment { a, b, value, error }
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    const LIMIT: usize = 2000;
    let first = kronrod15(f, a, b);
    if !first.value.is_finite() {
        return Err(BdmError::Evaluation { point: vec![a, b] });
    }
    let mut total = first.value;
    let mut err = first.error;
    let mut heap = BinaryHeap::new();
    heap.push(first);
    while err > tol.max(1e-15 * total.abs()) {
        if heap.len() >= LIMIT {
            return Err(BdmError::Accuracy { estimate: total, error: err });
        }
        let worst = heap.pop().expect("heap is never empty here");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(BdmError::Accuracy { estimate: total, error: err });
        }
        let left = kronrod15(f, worst.a, mid);
        let right = kronrod15(f, mid, worst.b);
        total += left.value + right.value - worst.value;
        err += left.error + right.error - worst.error;
        if !total.is_finite() {
            return Err(BdmError::Evaluation { point: vec![worst.a, worst.b] });
        }
        heap.push(left);
        heap.push(right);
        // Re-sum to stop rounding drift in the running totals.
        if heap.len() % 64 == 0 {
            total = heap.iter().map(|s| s.value).sum();
            err = heap.iter().map(|s| s.error).sum();
        }
    }
    Ok(heap.iter().map(|s| s.value).sum())
}

/// Adaptive Gauss–Kronrod integral of `f` over `[lo, hi]`. Either limit may be
/// infinite; infinite ranges are mapped to finite ones with `x = c ± tan t`.
pub fn integrate_1d(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    if lo.is_nan() || hi.is_nan() {
        return Err(BdmError::Domain("integration limit is NaN".into()));
    }
    if lo == hi {
        return Ok(0.0);
    }
    if lo > hi {
        return integrate_1d(f, hi, lo, tol).map(|v| -v);
    }
    let guard = |v: f64, w: f64| if v == 0.0 { 0.0 } else { v * w };
    let half_pi = std::f64::consts::FRAC_PI_2;
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => adaptive(f, lo, hi, tol),
        (false, false) => {
            let g = |t: f64| {
                let c = t.cos();
                guard(f(t.tan()), 1.0 / (c * c))
            };
            adaptive(&g, -half_pi, half_pi, tol)
        }
        (true, false) => {
            let g = |t: f64| {
                let c = t.cos();
                guard(f(lo + t.tan()), 1.0 / (c * c))
            };
            adaptive(&g, 0.0, half_pi, tol)
        }
        (false, true) => {
            let g = |t: f64| {
                let c = t.cos();
                guard(f(hi - t.tan()), 1.0 / (c * c))
            };
            adaptive(&g, 0.0, half_pi, tol)
        }
    }
}

/// Gauss–Hermite rule for the standard normal weight (weights sum to 1).
/// Nodes are eigenvalues of the Jacobi matrix polished by Newton steps;
/// weights are Christoffel numbers `1/Σ pₖ(x)²` over the orthonormal
/// polynomials, which keeps the far-tail weights accurate in relative terms
/// (eigenvector components only carry absolute accuracy).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 0 {
        return (vec![], vec![]);
    }
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(f64::total_cmp);
    // orthonormal p_0..p_n at x, and the sum of squares up to p_{n-1}
    let eval = |x: f64| {
        let (mut prev, mut cur) = (0.0, 1.0);
        let mut sum_sq = 0.0;
        let mut dcur = 0.0;
        let mut dprev = 0.0;
        for k in 0..n {
            sum_sq += cur * cur;
            let kf = k as f64;
            let next = (x * cur - kf.sqrt() * prev) / (kf + 1.0).sqrt();
            let dnext = (cur + x * dcur - kf.sqrt() * dprev) / (kf + 1.0).sqrt();
            prev = cur;
            cur = next;
            dprev = dcur;
            dcur = dnext;
        }
        (cur, dcur, sum_sq)
    };
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (p, dp, _) = eval(*x);
            if dp != 0.0 {
                *x -= p / dp;
            }
        }
    }
    for k in 0..n / 2 {
        let x = 0.5 * (nodes[n - 1 - k] - nodes[k]);
        nodes[k] = -x;
        nodes[n - 1 - k] = x;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let weights: Vec<f64> = nodes.iter().map(|&x| 1.0 / eval(x).2).collect();
    let total: f64 = weights.iter().sum();
    (nodes, weights.into_iter().map(|w| w / total).collect())
}

/// `E[f(X)]` for `X ~ N(center, scale)` by tensor-product Gauss–Hermite with
/// `nodes` points per axis. Dimension is capped at 3.
pub fn integrate_gh(f: RealFn, center: &DVector<f64>, scale: &DMatrix<f64>, nodes: usize) -> Result<f64> {
    let d = center.len();
    if d > 3 {
        return Err(BdmError::Unsupported(format!("Gauss-Hermite quadrature in {d} dimensions (max 3)")));
    }
    if scale.nrows() != d || scale.ncols() != d {
        return Err(BdmError::Dimension { expected: format!("{d}x{d} scale"), got: scale.nrows() });
    }
    if d == 0 {
        return Ok(f(&[]));
    }
    let chol = scale
        .clone()
        .cholesky()
        .ok_or_else(|| BdmError::LinearAlgebra("quadrature scale is not positive definite".into()))?;
    let l = chol.l();
    let (z, w) = gauss_hermite(nodes);
    let n = z.len();
    let total = n.pow(d as u32);
    let mut sum = 0.0;
    let mut idx = vec![0usize; d];
    let mut zv = DVector::zeros(d);
    for flat in 0..total {
        let mut rem = flat;
        let mut weight = 1.0;
        for a in 0..d {
            idx[a] = rem % n;
            rem /= n;
            zv[a] = z[idx[a]];
            weight *= w[idx[a]];
        }
        if weight < 1e-300 {
            continue;
        }
        let x = center + &l * &zv;
        let v = f(x.as_slice());
        if !v.is_finite() {
            return Err(BdmError::Evaluation { point: x.as_slice().to_vec() });
        }
        sum += weight * v;
    }
    Ok(sum)
}

/// Brent's root finder on a bracket with a sign change.
pub fn brent(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    let (mut a, mut b) = (a, b);
    let (mut fa, mut fb) = (f(a), f(b));
    if !fa.is_finite() || !fb.is_finite() {
        return Err(BdmError::Evaluation { point: vec![a, b] });
    }
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(BdmError::Bracketing(format!("f({a}) = {fa:e} and f({b}) = {fb:e} share a sign")));
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..200 {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            if 2.0 * p < (3.0 * xm * q - (tol1 * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b);
        if !fb.is_finite() {
            return Err(BdmError::Evaluation { point: vec![b] });
        }
    }
    Err(BdmError::Convergence { iterations: 200, grad_norm: fb.abs(), trace: vec![] })
}

/// Expands `[from, from + step·2^k]` until `f` changes sign relative to `f(from)`.
/// Returns the bracket `(lo, hi)` ordered ascending.
pub fn expand_bracket(f: &dyn Fn(f64) -> f64, from: f64, step: f64, max_expansions: usize) -> Result<(f64, f64)> {
    let f0 = f(from);
    if !f0.is_finite() {
        return Err(BdmError::Evaluation { point: vec![from] });
    }
    let mut inner = from;
    let mut width = step;
    for _ in 0..max_expansions {
        let outer = from + width;
        let fo = f(outer);
        if fo.is_finite() && (fo == 0.0 || fo.signum() != f0.signum()) {
            return Ok(if outer > inner { (inner, outer) } else { (outer, inner) });
        }
        if fo.is_finite() {
            inner = outer;
        }
        width *= 2.0;
    }
    Err(BdmError::Bracketing(format!(
        "no sign change within {max_expansions} expansions from {from} with step {step}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specialfn::norm_pdf;

    #[test]
    fn quadratic_derivatives() {
        let f = |x: &[f64]| x[0] * x[0];
        let r = fd_derivatives(&f, &[3.0], 3, false).unwrap();
        assert!((r.gradient[0] - 6.0).abs() < 1e-6);
        assert!((r.hessian[(0, 0)] - 2.0).abs() < 1e-6);
        assert!(r.third_unmixed[0].abs() < 1e-6);
    }

    #[test]
    fn exponential_loglik_derivatives() {
        let (n, t) = (6.0, 7.2);
        let f = move |x: &[f64]| -n * x[0].ln() - t / x[0];
        let r = fd_derivatives(&f, &[1.2], 3, true).unwrap();
        assert!((r.hessian[(0, 0)] + 4.1667).abs() < 1e-4);
        let exact2: f64 = n / 1.44 - 2.0 * t / 1.728;
        assert!((r.hessian[(0, 0)] - exact2).abs() < 1e-5);
        // ℓ‴ = -2n/θ³ + 6t/θ⁴
        assert!((r.third_unmixed[0] - 13.8889).abs() < 1e-3);
        assert_eq!(r.third_full.unwrap().get(0, 0, 0), r.third_unmixed[0]);
    }

    #[test]
    fn mixed_third_derivatives() {
        let f = |x: &[f64]| x[0] * x[0] * x[1] + x[1].powi(3) / 6.0 + x[0] * x[1] * x[2];
        let t = fd_third_full(&f, &[0.3, -0.7, 1.1]).unwrap();
        assert!((t.get(0, 0, 1) - 2.0).abs() < 1e-5);
        assert!((t.get(1, 0, 0) - 2.0).abs() < 1e-5);
        assert!((t.get(1, 1, 1) - 1.0).abs() < 1e-5);
        assert!((t.get(0, 1, 2) - 1.0).abs() < 1e-5);
        assert!(t.get(0, 0, 0).abs() < 1e-5);
        assert!(t.asymmetry() < 1e-12);
    }

    #[test]
    fn non_finite_evaluation_reports_point() {
        let f = |x: &[f64]| x[0].ln();
        match fd_gradient(&f, &[0.0]) {
            Err(BdmError::Evaluation { point }) => assert_eq!(point.len(), 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn maximize_examples() {
        let (n, t) = (6.0, 7.2);
        let post = move |x: &[f64]| -n * x[0].ln() - t / x[0] - x[0].ln();
        let map = maximize(&post, &[1.0], 1e-9).unwrap();
        assert!((map[0] - t / (n + 1.0)).abs() < 1e-6);
        let lik = move |x: &[f64]| -n * x[0].ln() - t / x[0];
        let mle = maximize(&lik, &[2.0], 1e-9).unwrap();
        assert!((mle[0] - 1.2).abs() < 1e-8);
        let bowl = |x: &[f64]| -(x[0] * x[0] + x[1] * x[1]);
        let m = maximize(&bowl, &[0.4, -0.9], 1e-9).unwrap();
        assert!(m.amax() < 1e-9);
    }

    #[test]
    fn maximize_reports_divergence() {
        let f = |x: &[f64]| x[0];
        assert!(matches!(maximize(&f, &[0.0], 1e-9), Err(BdmError::Convergence { .. })));
    }

    #[test]
    fn maximize_rejects_supremum_at_infinity() {
        // log-likelihood of a separated logistic sample: increasing, bounded by 0
        let f = |x: &[f64]| -(-x[0]).exp().ln_1p() - (-2.0 * x[0]).exp().ln_1p();
        assert!(matches!(maximize(&f, &[0.0], 1e-9), Err(BdmError::Convergence { .. })));
    }

    #[test]
    fn profile_of_separable_function() {
        let f = |x: &[f64]| -(x[0] - 1.0).powi(2) - (x[1] - x[0]).powi(2) - (x[2] + 2.0).powi(2);
        let lam = profile_maximize(&f, None, 0, 0.5, &[0.0, 0.0], MaxOptions::default()).unwrap();
        assert!((lam[0] - 0.5).abs() < 1e-7);
        assert!((lam[1] + 2.0).abs() < 1e-7);
        let empty = profile_maximize(&f, None, 0, 0.5, &[], MaxOptions::default()).unwrap();
        assert_eq!(empty.len(), 0);
    }

    #[test]
    fn integrate_examples() {
        let one = integrate_1d(&norm_pdf, f64::NEG_INFINITY, f64::INFINITY, 1e-10).unwrap();
        assert!((one - 1.0).abs() < 1e-10);
        for &z0 in &[-1.5, 0.0, 0.8, 2.5] {
            let v = integrate_1d(&|x| x.powi(3) * norm_pdf(x), z0, f64::INFINITY, 1e-10).unwrap();
            assert!((v - norm_pdf(z0) * (z0 * z0 + 2.0)).abs() < 1e-10);
        }
        let left = integrate_1d(&norm_pdf, f64::NEG_INFINITY, 0.0, 1e-10).unwrap();
        assert!((left - 0.5).abs() < 1e-12);
        let poly = integrate_1d(&|x| x * x, 0.0, 3.0, 1e-12).unwrap();
        assert!((poly - 9.0).abs() < 1e-12);
    }

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite(64);
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m2 - 1.0).abs() < 1e-12);
        assert!((m4 - 3.0).abs() < 1e-11);

        let center = DVector::from_vec(vec![0.3, -1.2]);
        let scale = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 0.5]);
        let one = integrate_gh(&|_| 1.0, &center, &scale, 64).unwrap();
        assert!((one - 1.0).abs() < 1e-12);
        for i in 0..2 {
            let m = integrate_gh(&|x| x[i], &center, &scale, 64).unwrap();
            assert!((m - center[i]).abs() < 1e-10);
        }
        let c4 = DVector::zeros(4);
        assert!(matches!(
            integrate_gh(&|_| 1.0, &c4, &DMatrix::identity(4, 4), 8),
            Err(BdmError::Unsupported(_))
        ));
    }

    #[test]
    fn brent_finds_roots() {
        let r = brent(&|x| x * x - 2.0, 0.0, 2.0, 1e-14).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-13);
        assert!(matches!(brent(&|x| x * x + 1.0, -1.0, 1.0, 1e-12), Err(BdmError::Bracketing(_))));
        let (lo, hi) = expand_bracket(&|x| x - 10.0, 0.0, 1.0, 50).unwrap();
        assert!(lo <= 10.0 && hi >= 10.0);
        let (lo, hi) = expand_bracket(&|x| x + 3.0, 0.0, -1.0, 50).unwrap();
        assert!(lo <= -3.0 && hi >= -3.0);
    }
}
